"""Command-line entry point: ``examrec <command> [flags]``.

Commands: generate, train, evaluate, ablate, sweep, report.  Any RunConfig
key can be passed as ``--key value`` (dashes or underscores) and overrides
the ``--config`` file.  Exit codes: 0 success, 1 user error, 2 runtime failure.
Relative output paths are resolved under ``$EXAMREC_OUTPUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from examrec.config import RunConfig
from examrec.ehr_graph import SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from examrec.errors import ConfigError, ParseError, SchemaError

OUTPUT_ENV = "EXAMREC_OUTPUT_DIR"

ABLATIONS = {
    "full": {},
    "w/o Diffusion": {"use_diffusion": False},
    "w/o RGAT": {"use_rgat": False},
    "w/o KANsformer": {"use_kansformer": False},
}

SWEEPS = {
    "k": ("k", [10, 20, 30, 40, 50]),
    "layers": ("rgat_layers", [1, 2, 3, 4]),
    "eps": ("gate_eps", [0.2, 0.4, 0.6, 0.8, 1.0]),
}

METRIC_COLUMNS = ["HR@5", "HR@10", "NDCG@5", "NDCG@10"]


class UserError(Exception):
    """Bad input from the caller; reported with exit code 1."""


def output_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _input_path(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"file not found: {path}")
    return p


# --------------------------------------------------------------------------
# argument parsing


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper(),
                           default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="examrec", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    for f in fields(SyntheticConfig):
        if f.name == "seq_len_range":
            g.add_argument("--seq-len", nargs=2, type=int, dest="seq_len_range", metavar=("MIN", "MAX"))
        else:
            g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default))

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    _config_flags(t)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--per-patient", metavar="PATH", help="also write per-patient ranks")
    e.add_argument("--full-catalog", action="store_true", help="rank against every unseen examination")
    e.add_argument("--negatives", type=int)
    e.add_argument("--seed", type=int)

    a = sub.add_parser("ablate", help="train the full model and each component ablation")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out", default="ablation.csv")
    _config_flags(a)

    s = sub.add_parser("sweep", help="hyperparameter grid over k, RGAT layers or gate epsilon")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--param", required=True, choices=sorted(SWEEPS))
    s.add_argument("--values", help="comma-separated values replacing the default grid")
    s.add_argument("--out", default="sweep.csv")
    _config_flags(s)

    r = sub.add_parser("report", help="render loss curves and result tables to PNG")
    r.add_argument("--losses", help="loss CSV written by train")
    r.add_argument("--table", action="append", default=[], help="ablation or sweep CSV (repeatable)")
    r.add_argument("--out-dir", default="report")
    return parser


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file not found: {args.config}")
        cfg = RunConfig.from_file(path)
    else:
        cfg = RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.with_overrides(overrides).validate()


def _load_data(path: str):
    return load_dataset(_input_path(path))


def _metric_row(rec) -> list[str]:
    return [f"{rec.hr[5]:.6f}", f"{rec.hr[10]:.6f}", f"{rec.ndcg[5]:.6f}", f"{rec.ndcg[10]:.6f}"]


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    given = {f.name: getattr(args, f.name) for f in fields(SyntheticConfig) if getattr(args, f.name) is not None}
    if "seq_len_range" in given:
        given["seq_len_range"] = tuple(given["seq_len_range"])
    ds = generate_synthetic(SyntheticConfig(**given))
    out = output_path(args.out)
    save_dataset(ds, out)
    print(f"wrote {len(ds.patients)} patients to {out}")


def cmd_train(args) -> None:
    from examrec.trainer import train

    cfg = load_config(args)
    ds = _load_data(args.data)
    ckpt, report = train(ds, cfg)
    out = output_path(args.out)
    ckpt.save(out)
    report.losses.write_csv(out.with_name(out.name + ".losses.csv"))
    report.test.write_csv(out.with_name(out.name + ".metrics.csv"))
    print(f"best round {report.best_round}: {report.test.summary()}")
    print(f"checkpoint {out} (config {cfg.hash()})")


def cmd_evaluate(args) -> None:
    from examrec.trainer import Checkpoint, evaluate_checkpoint

    ckpt = Checkpoint.load(_input_path(args.ckpt))
    ds = _load_data(args.data)
    if ds.vocab != ckpt.vocab:
        raise UserError("dataset vocabulary does not match the checkpoint")
    rec, split = evaluate_checkpoint(ckpt, ds, args.negatives, args.seed, args.full_catalog)
    out = output_path(args.out)
    rec.write_csv(out)
    if args.per_patient:
        rec.write_ranks(output_path(args.per_patient), split.targets)
    print(rec.summary())
    print(f"metrics {out}")


def _run_variants(args, variants: list[tuple[list[str], dict]], header: list[str]) -> None:
    from examrec.trainer import train

    base = load_config(args)
    ds = _load_data(args.data)
    out = output_path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + METRIC_COLUMNS)
        for labels, changes in variants:
            _, report = train(ds, base.replace(**changes))
            w.writerow(labels + _metric_row(report.test))
            fh.flush()
            print(f"{' '.join(labels)}: {report.test.summary()}")
    print(f"table {out}")


def cmd_ablate(args) -> None:
    _run_variants(args, [([name], ch) for name, ch in ABLATIONS.items()], ["variant"])


def cmd_sweep(args) -> None:
    key, grid = SWEEPS[args.param]
    if args.values:
        grid = [v.strip() for v in args.values.split(",") if v.strip()]
    probe = RunConfig()
    variants = []
    for v in grid:
        value = getattr(probe.with_overrides({key: str(v)}), key)
        variants.append(([args.param, str(value)], {key: value}))
    _run_variants(args, variants, ["param", "value"])


def cmd_report(args) -> None:
    from examrec import report

    if not args.losses and not args.table:
        raise UserError("nothing to report: pass --losses and/or --table")
    out_dir = output_path(Path(args.out_dir) / "x").parent
    written = []
    if args.losses:
        written += report.loss_curves(_input_path(args.losses), out_dir)
    for table in args.table:
        written += report.metric_table(_input_path(table), out_dir)
    for p in written:
        print(p)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; that is a user error here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UserError, ConfigError, ParseError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
