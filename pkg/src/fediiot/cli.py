"""``fediiot`` command line: run, compare and curve.

Exit status is 0 on success, 1 for configuration errors and 2 for failures
while running or writing results.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import accuracy_vs_institutions, compare_schemes, load_config, write_metrics
from .experiments.config import ALL_SCHEMES, Scheme
from .fl import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_counts(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--counts must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fediiot", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-scheme progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        sp.add_argument("--overwrite", action="store_true", help="replace existing metric files")
        sp.add_argument("--workers", type=int, default=1, help="processes for independent (scheme, seed) cells")

    common(sub.add_parser("run", help="run the configured schemes for every seed"))
    common(sub.add_parser("compare", help="run all five schemes and report median accuracies"))
    curve = sub.add_parser("curve", help="accuracy versus number of institutions")
    common(curve)
    curve.add_argument("--counts", required=True, help="comma-separated institution counts, e.g. 1,3,5")
    curve.add_argument("--scheme", default=Scheme.FL_GAN.value, choices=[s.value for s in ALL_SCHEMES])
    return p


def _print_comparison(comparison) -> None:
    for scheme, median in comparison.medians().items():
        print(f"{scheme.value:<15} median final accuracy {median:.4f}")
    print(f"ordering CENTRALIZED >= FL_GAN >= FL_NO_GAN >= STANDALONE_GAN >= STANDALONE: {comparison.ordering_holds()}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        counts = _parse_counts(args.counts) if args.command == "curve" else None
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or config.output_dir
    try:
        if args.command == "curve":
            points = accuracy_vs_institutions(config, counts, args.scheme, workers=args.workers)
            write_metrics(out, config, "curve", curve=points, overwrite=args.overwrite)
            for pt in points:
                print(f"{pt.count} institutions: median accuracy {pt.median_accuracy:.4f}")
        else:
            schemes = ALL_SCHEMES if args.command == "compare" else config.schemes
            comparison = compare_schemes(config, schemes, workers=args.workers)
            write_metrics(out, config, args.command, comparison.results, comparison, overwrite=args.overwrite)
            _print_comparison(comparison)
            if any(c.error for c in comparison.cells):
                return EXIT_RUNTIME
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote metrics to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
