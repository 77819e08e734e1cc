import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from liquidlos import autoencoder, concepts, forecaster, synthdata  # noqa: E402


def build_pipeline(n_patients, seed, ae_epochs=30, **spec_kw):
    cohort = synthdata.generate_cohort(synthdata.CohortSpec(n_patients=n_patients, seed=seed, **spec_kw))
    vectors = concepts.vectorize_notes(cohort.notes, cohort.lexicon)
    split = forecaster.split_patients([t.patient_id for t in cohort.timelines], seed)
    train_ids = set(split["train"])
    X = np.stack([v.values for k, v in vectors.items() if k[0] in train_ids]).astype(float)
    ae = autoencoder.quantize(autoencoder.train_ae(X, autoencoder.AETrainConfig(epochs=ae_epochs, seed=seed)).params)
    seqs = {s.patient_id: s for s in forecaster.build_sequences(cohort.timelines, vectors, ae)}
    parts = {k: [seqs[p] for p in split[k]] for k in ("train", "val", "test")}
    return {"cohort": cohort, "vectors": vectors, "ae": ae, "split": split, "seqs": seqs, **parts}


@pytest.fixture(scope="session")
def small_pipeline():
    return build_pipeline(80, seed=11)


@pytest.fixture(scope="session")
def trained_ltc(small_pipeline):
    cfg = forecaster.TrainConfig(epochs=25, seed=3)
    return forecaster.train("ltc", small_pipeline["train"], small_pipeline["val"], cfg)
