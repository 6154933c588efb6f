"""Command-line front end: synth-data, train, attack, sweep, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .data_lab import DatasetFormatError, _atomic_write, load_dataset, save_dataset
from .detectors.attack import ScoreTableError
from .experiment import comparison_table, make_dataset, make_split, prepare, run_attack, run_sweep, sweep_csv
from .report import emit_report
from .trainer import history_csv


def _config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else load_config(path)


def _dataset(cfg: RunConfig, data: Optional[str]):
    return load_dataset(data) if data else make_dataset(cfg)


def history_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".history.csv")


def cmd_synth_data(args) -> int:
    cfg = _config(args.config)
    if cfg["data.source"] != "synth":
        raise ConfigError("synth-data needs data.source = synth")
    save_dataset(make_dataset(cfg), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    p = prepare(cfg, _dataset(cfg, args.data))
    save_model(p.model, args.out)
    _atomic_write(history_path(args.out), history_csv(p.history).encode())
    acc = p.accuracies()
    print(f"train_acc={acc['train_acc']!r} test_acc={acc['test_acc']!r} epochs={len(p.history)}")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args.config)
    model = load_model(args.model) if args.model else None
    p = prepare(cfg, _dataset(cfg, args.data), model)
    table = run_attack(p)
    table.write(args.out)
    sys.stdout.write(comparison_table(table))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    model = load_model(args.model) if args.model else None
    p = prepare(cfg, _dataset(cfg, args.data), model)
    candidates, chosen, chosen_cfg = run_sweep(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "sweep.csv", sweep_csv(candidates, cfg["sweep.detector"]).encode())
    _atomic_write(out / "chosen.cfg", chosen_cfg.to_text().encode())
    print(f"chosen={chosen.label()}")
    return 0


def cmd_report(args) -> int:
    emit_report(args.scores, args.out, seed=args.seed, log_fpr=args.log_fpr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mialab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic MIAD dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the target model and write a MIAM checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", help="MIAD file (default: data section of the config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="score attack-test queries with every detector, unboosted and boosted")
    p.add_argument("--model", help="MIAM checkpoint (default: train one from the config)")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="evaluate the interrogation grid on attack-validation")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="metrics CSV and ROC plot from score tables")
    p.add_argument("scores", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed recorded in the report rows")
    p.add_argument("--log-fpr", action="store_true", help="log-scaled FPR axis")
    p.set_defaults(func=cmd_report)
    return parser


_KINDS = (
    (ConfigError, "config", 2),
    (DatasetFormatError, "data", 1),
    (CheckpointError, "checkpoint", 1),
    (ScoreTableError, "scores", 1),
    (OSError, "io", 1),
)


def error_line(exc: BaseException) -> tuple:
    for cls, kind, code in _KINDS:
        if isinstance(exc, cls):
            break
    else:
        kind, code = "runtime", 1
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"mialab: error: {kind}: {msg}", code


def dispatch(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line error for any failure
        line, code = error_line(exc)
        print(line, file=sys.stderr)
        return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
