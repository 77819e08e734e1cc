"""Command-line entry point: ``liquidlos <subcommand> [flags]``.

Every subcommand reads and writes plain files (JSONL, CSV, JSON and binary
checkpoints) under ``--out``. All randomness derives from ``--seed``; each
stage mixes the stage name into it so stages draw independent streams.
Failures print one JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__, autoencoder, concepts, forecaster, soi, synthdata
from .timeline import read_timelines_csv

log = logging.getLogger("liquidlos")


def derive_seed(seed: int, stage: str) -> int:
    """Stage-specific seed; stable across runs and platforms."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _lexicon(args) -> concepts.ConceptLexicon:
    return concepts.load_lexicon(_existing(args.lexicon)) if args.lexicon else concepts.default_lexicon()


def _tables(args) -> soi.ScoringTables:
    return soi.load_scoring_tables(_existing(args.tables)) if args.tables else soi.default_tables()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> dict:
    spec = synthdata.CohortSpec(
        n_patients=args.n_patients,
        lexicon=_lexicon(args),
        mean_los=args.mean_los,
        seed=derive_seed(args.seed, "synth"),
        p_neg=args.p_neg,
        p_missing=args.p_missing,
    )
    paths = synthdata.generate_cohort(spec).write(_out(args))
    return {k: str(v) for k, v in paths.items()}


def cmd_vectorize(args) -> dict:
    lex = _lexicon(args)
    triggers = concepts.load_triggers(_existing(args.triggers)) if args.triggers else None
    notes = concepts.load_notes(_existing(args.notes))
    vectors = concepts.vectorize_notes(notes, lex, triggers)
    path = _out(args) / "health_vectors.csv"
    concepts.write_vectors_csv(path, vectors, lex)
    return {"vectors": str(path), "rows": len(vectors), "concepts": lex.vocab_size}


def cmd_train_ae(args) -> dict:
    _, vectors = concepts.read_vectors_csv(_existing(args.vectors))
    if not vectors:
        raise ValueError("no health vectors to train on")
    X = np.stack([vectors[k].values for k in sorted(vectors)]).astype(np.float64)
    hidden, latent = autoencoder.default_dims(X.shape[1])
    if args.hidden_dims is not None:
        hidden = args.hidden_dims
    if args.latent_dim is not None:
        latent = args.latent_dim
    cfg = autoencoder.AETrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=derive_seed(args.seed, "train-ae")
    )
    result = autoencoder.train_ae(X, cfg, hidden_dims=hidden, latent_dim=latent)
    out = _out(args)
    autoencoder.save_ae(out / "autoencoder.ckpt", result.params)
    (out / "autoencoder_loss.json").write_text(_dump({"loss_curve": result.loss_curve}), encoding="utf-8")
    return {"checkpoint": str(out / "autoencoder.ckpt"), "final_loss": result.loss_curve[-1]}


def cmd_soi(args) -> dict:
    tables = _tables(args)
    rows = [
        (tl.patient_id, r.day, soi.soi_vector(r.panel, tables))
        for tl in read_timelines_csv(_existing(args.timelines))
        for r in tl.days
    ]
    path = _out(args) / "soi.csv"
    soi.write_soi_csv(path, rows)
    return {"soi": str(path), "rows": len(rows)}


def _sequences(args):
    timelines = read_timelines_csv(_existing(args.timelines))
    cuis, vectors = concepts.read_vectors_csv(_existing(args.vectors))
    ae = autoencoder.load_ae(_existing(args.ae), vocab_size=len(cuis))
    scores = soi.read_soi_csv(_existing(args.soi)) if args.soi else None
    seqs = forecaster.build_sequences(timelines, vectors, ae, _tables(args), scores)
    return {s.patient_id: s for s in seqs}


def _train_config(args) -> forecaster.TrainConfig:
    return forecaster.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=derive_seed(args.seed, f"train-{args.model}"),
        unfolds=args.unfolds,
        target_scale=args.target_scale,
        n_units=args.units,
        lstm_hidden=args.lstm_hidden,
    )


def cmd_train(args) -> dict:
    by_id = _sequences(args)
    out = _out(args)
    if args.split:
        split = json.loads(_existing(args.split).read_text(encoding="utf-8"))
    else:
        split = forecaster.split_patients(sorted(by_id), derive_seed(args.seed, "split"))
    (out / "split.json").write_text(_dump(split), encoding="utf-8")
    unknown = set(split["train"] + split["val"] + split["test"]) - set(by_id)
    if unknown:
        raise ValueError(f"split lists {len(unknown)} patient(s) missing from the timelines")
    parts = {k: [by_id[p] for p in split[k]] for k in ("train", "val", "test")}
    cfg = _train_config(args)
    result = forecaster.train(args.model, parts["train"], parts["val"], cfg)
    ckpt = out / f"{args.model}.ckpt"
    forecaster.save_model(ckpt, result.model, {"target_scale": cfg.target_scale, "input_config": args.input_config})
    curves = {
        "initial_val": result.initial_val,
        "train": result.train_curve,
        "val": result.val_curve,
        "best_epoch": result.best_epoch,
    }
    (out / f"{args.model}_loss.json").write_text(_dump(curves), encoding="utf-8")
    eval_set = parts["test"] or parts["val"]
    metrics = forecaster.metrics_report(result.model, eval_set, cfg.scale, args.input_config)
    (out / f"metrics_{args.model}.json").write_text(_dump(metrics), encoding="utf-8")
    return {"checkpoint": str(ckpt), "metrics": metrics}


def cmd_report(args) -> dict:
    by_id = _sequences(args)
    model, extra = forecaster.load_model(_existing(args.checkpoint))
    scale = forecaster.TrainConfig(target_scale=extra.get("target_scale", "normalized_by_31")).scale
    if args.patient:
        ids = args.patient
    elif args.split:
        ids = json.loads(_existing(args.split).read_text(encoding="utf-8"))["test"]
    else:
        ids = sorted(by_id)
    missing = [p for p in ids if p not in by_id]
    if missing:
        raise KeyError(f"unknown patient id(s): {', '.join(missing)}")
    out = _out(args) / "trajectories"
    out.mkdir(exist_ok=True)
    paths = [str(forecaster.report_trajectory(model, by_id[p], out / f"{p}.csv", scale)) for p in ids]
    return {"trajectories": paths}


def cmd_eval(args) -> dict:
    preds, labels = [], []
    for path in args.trajectories:
        p, y = forecaster.read_trajectory(_existing(path))
        preds.append(p)
        labels.append(y)
    pred_days, label_days = np.concatenate(preds), np.concatenate(labels)
    records = []
    for name, div in (("normalized_by_31", forecaster.LOS_SCALE), ("raw_days", 1.0)):
        m = forecaster.evaluate(pred_days / div, label_days / div)
        records.append(
            {"model": args.model, "input_config": args.input_config, "scale": name, "r2": m.r2, "mae": m.mae, "rmse": m.rmse}
        )
    path = _out(args) / "metrics_eval.json"
    path.write_text(_dump(records), encoding="utf-8")
    return {"metrics": records}


def cmd_paramcount(args) -> int:
    model, _ = forecaster.load_model(_existing(args.checkpoint))
    return forecaster.count_params(model)


# -- argument parsing --------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed; per-stage seeds are derived from it")
    p.add_argument("--config", help="JSON file of flag values (keys use flag names); explicit flags win")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _inputs(p, *names):
    helps = {
        "lexicon": "lexicon JSONL (default: bundled lexicon)",
        "tables": "scoring tables file (default: bundled tables)",
        "timelines": "timeline CSV",
        "vectors": "health vector CSV from `vectorize`",
        "ae": "autoencoder checkpoint from `train-ae`",
        "soi": "SOI CSV from `soi` (default: score the timeline vitals)",
        "split": "split manifest JSON",
    }
    for n in names:
        p.add_argument(f"--{n}", help=helps[n])


def _training_flags(p, epochs=100):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liquidlos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p)
    _inputs(p, "lexicon")
    p.add_argument("--n-patients", type=int, default=500)
    p.add_argument("--mean-los", type=float, default=10.0, help="target mean length of stay in days")
    p.add_argument("--p-neg", type=float, default=0.3, help="probability of a negated mention per absent concept")
    p.add_argument("--p-missing", type=float, default=0.03, help="probability a vitals field is missing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vectorize", help="notes JSONL -> daily ternary health vectors CSV")
    _common(p)
    p.add_argument("--notes", help="notes JSONL")
    _inputs(p, "lexicon")
    p.add_argument("--triggers", help="negation trigger file (default: bundled triggers)")
    p.set_defaults(func=cmd_vectorize)

    p = sub.add_parser("train-ae", help="train the health-vector autoencoder")
    _common(p)
    _inputs(p, "vectors")
    _training_flags(p)
    p.add_argument("--hidden-dims", type=int, nargs="+", help="encoder hidden widths (default scales with vocabulary)")
    p.add_argument("--latent-dim", type=int, help="embedding width (default scales with vocabulary)")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("soi", help="score APACHE-II, SAPS-II, SOFA and OASIS per patient-day")
    _common(p)
    _inputs(p, "timelines", "tables")
    p.set_defaults(func=cmd_soi)

    p = sub.add_parser("train", help="train an LTC or LSTM forecaster")
    _common(p)
    p.add_argument("--model", choices=forecaster.MODEL_KINDS, default="ltc")
    _inputs(p, "timelines", "vectors", "ae", "soi", "tables", "split")
    _training_flags(p)
    p.add_argument("--unfolds", type=int, default=forecaster.TrainConfig.unfolds, help="ODE solver steps per day")
    p.add_argument("--target-scale", choices=forecaster.TARGET_SCALES, default="normalized_by_31")
    p.add_argument("--units", type=int, default=forecaster.TrainConfig.n_units, help="LTC non-sensory neurons")
    p.add_argument("--lstm-hidden", type=int, default=forecaster.TrainConfig.lstm_hidden)
    p.add_argument("--input-config", default="AutoencodedHealthVector+SOI", help="label recorded in metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", aliases=["predict"], help="per-day trajectory CSVs from a trained model")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint from `train`")
    _inputs(p, "timelines", "vectors", "ae", "soi", "tables", "split")
    p.add_argument("--patient", action="append", help="patient id (repeatable; default: test split or everyone)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="metrics from trajectory CSVs")
    _common(p)
    p.add_argument("trajectories", nargs="*", help="trajectory CSV files")
    p.add_argument("--model", default="unknown", help="label recorded in metrics")
    p.add_argument("--input-config", default="AutoencodedHealthVector+SOI", help="label recorded in metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("paramcount", help="print the parameter count of a model checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.set_defaults(func=cmd_paramcount)
    return parser


REQUIRED = {
    "vectorize": ("notes",),
    "train-ae": ("vectors",),
    "soi": ("timelines",),
    "train": ("timelines", "vectors", "ae"),
    "report": ("checkpoint", "timelines", "vectors", "ae"),
    "predict": ("checkpoint", "timelines", "vectors", "ae"),
    "eval": ("trajectories",),
    "paramcount": ("checkpoint",),
}


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling anything not given on the command line from --config."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = json.loads(_existing(args.config).read_text(encoding="utf-8"))
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(vars(args)) | ({"func", "command", "config"} & set(cfg))
        if unknown:
            raise ValueError(f"unknown config key(s) for {args.command}: {sorted(unknown)}")
        # Re-parse with config values as defaults so explicit flags still win.
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [n for n in REQUIRED.get(args.command, ()) if not getattr(args, n)]
    if missing:
        raise ValueError(f"{args.command}: missing required input(s): {', '.join('--' + m for m in missing)}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        result = args.func(args)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if isinstance(result, int):
        print(result)
    else:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
