"""Command-line entry point: ``coalign <command> [flags]``."""

from __future__ import annotations

import argparse
import os
import sys

from coalign.errors import ResourceLimitError
from coalign.harness import COMMANDS, UsageError, parse_config_text, resolve_config, run_command

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coalign", description="Run interaction experiments and emit CSV reports.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", help="output path; side files share its stem")
    p.add_argument("--budgets", help="comma-separated sample counts")
    p.add_argument("--repeats", type=int)
    p.add_argument("--dims", help="HxWxL2xD")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--force-sampling", action="store_true", default=None)
    p.add_argument("--freeze-surrogate", action="store_true", default=None)
    p.add_argument("--norm-mode", choices=("minmax", "rowwise"))
    p.add_argument("--workers", type=int)
    p.add_argument("--games", type=int)
    p.add_argument("--stream", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--inject-broken", action="store_true", default=None)
    return p


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = {}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read())
        cfg = resolve_config(args.command, file_values, flags)
    except (UsageError, OSError) as e:
        print(f"coalign: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_command(cfg)
    except ResourceLimitError as e:
        print(f"coalign: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    if cfg.out:
        _write(cfg.out, report.text)
        stem = os.path.splitext(cfg.out)[0]
        for suffix, text in report.files.items():
            _write(stem + suffix, text)
    else:
        sys.stdout.write(report.text)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
