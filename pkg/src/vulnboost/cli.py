"""Command-line entry point: ``vulnboost {synth,encode,train,evaluate,predict}``.

Settings are layered: built-in defaults, then ``--config`` (``key = value``
lines), then explicit flags.  Exit codes: 0 success, 2 configuration error,
3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import (SKEWED_WEIGHTS, FeatureSchema, encode_dataset, encode_features, fit_encoder,
                      load_raw_csv, synth_dataset, write_raw_csv)
from .errors import ConfigError, InvariantError, VulnBoostError
from .pipeline import (PipelineConfig, REPORT_FILE, SCHEMA_FILE, config_from_mapping,
                       parse_config_text, run_evaluate, run_predict, run_train, save_encoder)

logger = logging.getLogger("vulnboost")

IMBALANCE = {"skewed": SKEWED_WEIGHTS, "uniform": (1.0,) * 11}


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="global random seed")
    parser.add_argument("--config", type=Path, default=default,
                        help="key = value settings file")
    parser.add_argument("--output-dir", type=Path, default=default, help="where to write results")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulnboost",
        description="Grade network-asset vulnerability with one-vs-rest boosted trees.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labeled asset CSV")
    p.add_argument("--rows", type=int, default=5000)
    p.add_argument("--imbalance", choices=sorted(IMBALANCE), default="skewed")
    p.add_argument("--output", type=Path, help="CSV path (default: OUTPUT_DIR/assets.csv)")

    p = sub.add_parser("encode", parents=[common], help="encode raw records to numeric CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--schema", type=Path)

    p = sub.add_parser("train", parents=[common], help="split, balance, tune, train, evaluate")
    p.add_argument("--input", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--cv-folds", type=int)
    p.add_argument("--tune", action="store_true", default=None)
    p.add_argument("--smote-k", type=int)
    p.add_argument("--no-smote", action="store_true")
    p.add_argument("--particles", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--paper-ranges", action="store_true",
                   help="search n_estimators over [1000, 3000] instead of [50, 300]")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a saved model on labeled data")
    p.add_argument("--model", type=Path, required=True, help="run directory or its model/")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--schema", type=Path)

    p = sub.add_parser("predict", parents=[common], help="grade unlabeled assets")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, help="CSV path (default: stdout)")
    return parser


def _settings(args) -> dict[str, str]:
    values = {}
    if args.config is not None:
        try:
            values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.output_dir is not None:
        values["output_dir"] = str(args.output_dir)
    return values


def _train_config(args) -> PipelineConfig:
    values = _settings(args)
    flags = {"input_csv": args.input, "schema": args.schema, "test_fraction": args.test_fraction,
             "cv_folds": args.cv_folds, "smote_k": args.smote_k, "particles": args.particles,
             "iterations": args.iterations, "threads": args.threads}
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.tune:
        values["tune"] = "true"
    if args.no_smote:
        values["smote"] = "false"
    if args.paper_ranges:
        values["paper_ranges"] = "true"
    return config_from_mapping(values)


def _seed(args) -> int:
    return config_from_mapping({k: v for k, v in _settings(args).items()
                                if k == "seed"}).seed


def cmd_synth(args) -> int:
    out = args.output
    if out is None:
        if args.output_dir is None:
            raise ConfigError("synth needs --output or --output-dir")
        out = args.output_dir / "assets.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    records = synth_dataset(args.rows, IMBALANCE[args.imbalance], _seed(args))
    write_raw_csv(records, out, FeatureSchema.default())
    print(f"wrote {len(records)} rows to {out}")
    return 0


def cmd_encode(args) -> int:
    if args.output_dir is None:
        raise ConfigError("encode needs --output-dir")
    schema = FeatureSchema.default() if args.schema is None else FeatureSchema.load(args.schema)
    records = load_raw_csv(args.input, schema)
    labeled = bool(records) and len(records[0]) == len(schema.header)
    encoder = fit_encoder(records, schema)
    X = encode_dataset(records, schema, encoder).features if labeled else \
        encode_features(records, schema, encoder)
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with (out / "encoded.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.header if labeled else schema.names)
        for rec, row in zip(records, X):
            cells = [np.format_float_positional(v, trim="-") for v in row]
            w.writerow(cells + ([rec[-1]] if labeled else []))
    save_encoder(encoder, out / "encoder.json")
    (out / SCHEMA_FILE).write_text(schema.to_text(), encoding="utf-8")
    print(f"encoded {len(records)} rows into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if cfg.output_dir is None:
        raise ConfigError("train needs --output-dir (or output_dir in the config)")
    report = run_train(cfg)
    print(report.to_text(), end="")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_evaluate(args) -> int:
    report = run_evaluate(args.model, args.input, args.schema, args.output_dir)
    print(report.to_text(), end="")
    if args.output_dir is not None:
        print(f"{REPORT_FILE} written to {args.output_dir}")
    return 0


def cmd_predict(args) -> int:
    out = args.output
    if out is None and args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        out = args.output_dir / "predictions.csv"
    rows = run_predict(args.model, args.input, out)
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["row", "grade"])
        for i, r in enumerate(rows):
            w.writerow([i, r["grade"]])
    else:
        print(f"wrote {len(rows)} predictions to {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "encode": cmd_encode, "train": cmd_train,
            "evaluate": cmd_evaluate, "predict": cmd_predict}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VulnBoostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # a bug, not bad input
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return InvariantError.exit_code


if __name__ == "__main__":
    sys.exit(main())
