"""Command-line entry point.

Verbs: gen-data (render synthetic datasets), train (fit a toy model and
save its checkpoint), attack-eval (run the PGD sweep and persist reports),
report (re-derive report files from persisted records, or format
externally supplied accuracies with --fixture).

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .autodiff import ContractViolation
from .harness import (
    ConfigError,
    emit_report,
    fixture_report,
    format_epsilon,
    load_run_config,
    report_from_records,
    resolve_dataset,
    run_eval,
    train_model,
)
from .models import CheckpointFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advlm",
        description="Adversarial robustness harness for toy vision-language models.",
    )
    parser.add_argument("--config", type=Path, help="run configuration JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--output-dir", type=Path, help="override the config output_dir")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", help="render the synthetic dataset(s) named in the config")
    sub.add_parser("train", help="train the configured model and save its checkpoint")
    sub.add_parser(
        "attack-eval",
        help="run the PGD sweep; off-grid budgets use interpolated (alpha, iterations), "
             "an extension beyond the tabulated six-point grid",
    )
    rep = sub.add_parser("report", help="re-derive report files from persisted records")
    rep.add_argument("--fixture", type=Path,
                     help="format externally supplied accuracies instead of records")
    return parser


def _load_config(args):
    if args.config is None:
        raise ConfigError("--config is required for this verb")
    config = load_run_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.output_dir is not None:
        config = replace(config, output_dir=args.output_dir)
    return config


def _cmd_gen_data(args) -> int:
    config = _load_config(args)
    generated = False
    for ref in (config.dataset, config.train_dataset):
        if ref is not None and ref.synthetic is not None:
            manifest = ref.directory / "manifest.jsonl"
            from .data import gen_dataset

            gen_dataset(ref.synthetic, ref.directory)
            print(f"wrote {manifest}")
            generated = True
    if not generated:
        raise ConfigError("config names no synthetic dataset to generate")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args)
    checkpoint = train_model(config)
    print(f"wrote {checkpoint}")
    return EXIT_OK


def _cmd_attack_eval(args) -> int:
    config = _load_config(args)
    report = run_eval(config)
    for e in report.entries:
        print(f"{report.model_label} eps={format_epsilon(e.epsilon)} n={e.n} "
              f"clean={e.clean_accuracy:.1f} adv={e.adversarial_accuracy:.1f} "
              f"drop={e.accuracy_drop:.1f} failures={e.attack_failures}")
    print(f"wrote {config.output_dir / 'report.csv'}")
    print(f"wrote {config.output_dir / 'report.md'}")
    print(f"wrote {config.output_dir / 'records.jsonl'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    config = _load_config(args)
    if args.fixture is not None:
        try:
            raw = json.loads(args.fixture.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.fixture}: invalid JSON ({exc})") from exc
        report = fixture_report(raw["model"], raw["rows"])
        csv_path, md_path = emit_report(report, config.output_dir, fixture_mode=True)
    else:
        records = config.output_dir / "records.jsonl"
        report = report_from_records(records, config.model.display_label)
        csv_path, md_path = emit_report(report, config.output_dir)
    print(f"wrote {csv_path}")
    print(f"wrote {md_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack-eval": _cmd_attack_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, ContractViolation, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
