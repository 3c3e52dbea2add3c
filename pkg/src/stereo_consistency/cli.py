"""Command-line front end: gen-data, train, eval, diagnose, plot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint/config hash mismatch.
The output root comes from ``$STEREO_CONSISTENCY_OUTPUT`` when set, else ``output_dir``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import yaml

from . import experiment as ex
from .io import read_corpus, save_archive, write_corpus
from .metrics import D1_HEADER, read_reports_csv, write_reports_csv

OUTPUT_ENV = "STEREO_CONSISTENCY_OUTPUT"
EXIT_CONFIG, EXIT_DATA, EXIT_HASH = 2, 3, 4


def output_root(cfg: ex.ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def data_dir(cfg: ex.ExperimentConfig) -> Path:
    return output_root(cfg) / f"data-{ex.data_hash(cfg)}"


def run_dir(cfg: ex.ExperimentConfig) -> Path:
    return output_root(cfg) / f"run-{ex.config_hash(cfg)}"


def _resolve(args) -> tuple[ex.ExperimentConfig, list]:
    provenance: list = []
    overrides = list(args.set or [])
    flags = []
    if getattr(args, "ablation", None):
        base = ex.load_config(args.config, overrides)
        flags += [f"{k}={json.dumps(v)}" for k, v in ex.ablation_overrides(args.ablation, base).items()]
    if getattr(args, "no_contrastive", False):
        flags.append("scf.enabled=false")
    if getattr(args, "no_momentum", False):
        flags.append("scf.momentum=false")
    if getattr(args, "no_whitening", False):
        flags.append("ssw.enabled=false")
    cfg = ex.load_config(args.config, overrides + flags, provenance)
    for rec in provenance[len(provenance) - len(flags) :] if flags else []:
        rec["source"] = "flag"
    return cfg, provenance


def _header(cfg: ex.ExperimentConfig) -> str:
    v = " ".join(f"{k}={val}" for k, val in ex.versions().items())
    return f"config_hash={ex.config_hash(cfg)} seed={cfg.seed} {v} | {D1_HEADER}"


def _load_corpus(path: Path):
    try:
        return read_corpus(path)
    except FileNotFoundError as exc:
        raise ex.DataError(f"{exc}; run gen-data with the same config first") from exc
    except ValueError as exc:
        raise ex.DataError(str(exc)) from exc


def cmd_gen_data(cfg: ex.ExperimentConfig) -> Path:
    root = data_dir(cfg)
    train, test = ex.build_corpora(cfg)
    write_corpus(train, root / "train")
    write_corpus(test, root / "test")
    return root


def cmd_train(cfg: ex.ExperimentConfig, provenance: list | None = None) -> Path:
    corpus = _load_corpus(data_dir(cfg) / "train")
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(ex.config_to_dict(cfg), sort_keys=True), encoding="utf-8")
    (out / "provenance.json").write_text(json.dumps(provenance or [], indent=1, sort_keys=True), encoding="utf-8")
    run = ex.train(cfg, corpus, log_path=out / "train_log.jsonl")
    ex.save_checkpoint(run, out / "checkpoint.npz")
    return out


def _checkpoint(cfg, path):
    path = Path(path) if path else run_dir(cfg) / "checkpoint.npz"
    if not path.exists():
        raise ex.DataError(f"no checkpoint at {path}; run train first")
    net, _, _ = ex.load_checkpoint(path, cfg)
    return net


def cmd_eval(cfg: ex.ExperimentConfig, checkpoint=None) -> Path:
    net = _checkpoint(cfg, checkpoint)
    test = _load_corpus(data_dir(cfg) / "test")
    per_sample, summary = ex.evaluate(net, test, cfg, extra=ex.run_label(cfg))
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(per_sample, out / "eval.csv", _header(cfg))
    write_reports_csv(summary, out / "eval_summary.csv", _header(cfg))
    return out / "eval_summary.csv"


def cmd_diagnose(cfg: ex.ExperimentConfig, checkpoint=None) -> Path:
    net = _checkpoint(cfg, checkpoint)
    test = _load_corpus(data_dir(cfg) / "test")
    report, arrays = ex.diagnose(net, test, cfg)
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnose.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    save_archive(out / "diagnose_arrays.npz", arrays, {k: v for k, v in report.items() if k != "styles"})
    return out / "diagnose.json"


def cmd_plot(csv_paths, out_dir) -> list[Path]:
    rows = []
    for p in csv_paths:
        if not Path(p).exists():
            raise ex.DataError(f"no such CSV: {p}")
        rows.extend(read_reports_csv(p))
    tables = ex.plot_tables(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in tables.items():
        path = out_dir / f"{name}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            if table:
                cols = list(dict.fromkeys(k for row in table for k in row))
                writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
                writer.writeheader()
                writer.writerows(table)
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereo-consistency", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. train.steps=50")

    config_args(sub.add_parser("gen-data", help="generate the synthetic train/test corpus"))
    p = sub.add_parser("train", help="train one configuration")
    config_args(p)
    p.add_argument("--ablation", choices=sorted(ex.ABLATIONS), help="preset loss combination")
    p.add_argument("--no-contrastive", action="store_true", help="disable the contrastive consistency loss")
    p.add_argument("--no-momentum", action="store_true", help="use a shared encoder and no negative queue")
    p.add_argument("--no-whitening", action="store_true", help="disable selective whitening")
    for name, help_ in (("eval", "metrics across styles"), ("diagnose", "feature-consistency diagnosis")):
        p = sub.add_parser(name, help=help_)
        config_args(p)
        p.add_argument("--ablation", choices=sorted(ex.ABLATIONS))
        p.add_argument("--checkpoint", help="checkpoint path (default: the run directory for this config)")
    p = sub.add_parser("plot", help="plot-ready tables from eval summary CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default="plots")
    sub.add_parser("show-config", help="print the default config with comments")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "show-config":
            sys.stdout.write(ex.DEFAULT_CONFIG_YAML)
            return 0
        if args.command == "plot":
            for path in cmd_plot(args.csv, args.out):
                print(path)
            return 0
        cfg, provenance = _resolve(args)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train":
            print(cmd_train(cfg, provenance))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.checkpoint))
        elif args.command == "diagnose":
            print(cmd_diagnose(cfg, args.checkpoint))
        return 0
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ex.HashMismatchError as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return EXIT_HASH


if __name__ == "__main__":
    sys.exit(main())
