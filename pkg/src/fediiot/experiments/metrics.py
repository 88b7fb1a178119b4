"""CSV and manifest output.

Files written (all optional except the manifest):

* ``rounds.csv``: round, scheme, seed, global_loss, fed_accuracy, d_loss, g_loss,
  delivered, wall_ms, test_accuracy. GAN-phase rows fill d_loss/g_loss and leave
  the classifier columns blank; classifier rows do the opposite.
* ``gan.csv``: scheme, seed, round, d_loss, g_loss, d_real_mean, d_fake_mean.
* ``deliveries.csv``: scheme, seed, phase, round, client_id, dropped, arrival_ms.
* ``comparison.csv``: scheme, seed, final_accuracy.
* ``curve.csv``: count, median_accuracy.
* ``manifest.json``: command, config echo, seeds, code version, file list.

Floats use ``repr`` so values survive a write/parse round trip exactly. No
wall-clock time is recorded anywhere, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .. import __version__
from .config import ExperimentConfig
from .runner import Comparison, CurvePoint, SchemeResult

ROUNDS_COLUMNS = ["round", "scheme", "seed", "global_loss", "fed_accuracy", "d_loss", "g_loss",
                  "delivered", "wall_ms", "test_accuracy"]
GAN_COLUMNS = ["scheme", "seed", "round", "d_loss", "g_loss", "d_real_mean", "d_fake_mean"]
DELIVERY_COLUMNS = ["scheme", "seed", "phase", "round", "client_id", "dropped", "arrival_ms"]
COMPARISON_COLUMNS = ["scheme", "seed", "final_accuracy"]
CURVE_COLUMNS = ["count", "median_accuracy"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _rows(results: Sequence[SchemeResult]):
    rounds, gan, deliveries = [], [], []
    for res in results:
        s = res.scheme.value
        for rec in res.gan_history:
            m = rec.gan
            rounds.append([rec.round_index, s, res.seed, None, None, m and m.d_loss, m and m.g_loss,
                           len(rec.delivered), rec.wall_ms, None])
            if m is not None:
                gan.append([s, res.seed, rec.round_index, m.d_loss, m.g_loss, m.d_real_mean, m.d_fake_mean])
        for e in res.history:
            rounds.append([e.round, s, res.seed, e.global_loss, e.fed_accuracy, None, None,
                           e.delivered, e.wall_ms, e.test_accuracy])
        for phase, r, d in res.deliveries:
            deliveries.append([s, res.seed, phase, r, d.client_id, d.dropped, d.arrival_ms])
    return rounds, gan, deliveries


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_metrics(
    output_dir: str | Path,
    config: ExperimentConfig,
    command: str,
    results: Sequence[SchemeResult] = (),
    comparison: Comparison | None = None,
    curve: Sequence[CurvePoint] | None = None,
    overwrite: bool = False,
) -> list[Path]:
    """Writes the metric files; refuses to replace existing ones unless ``overwrite``."""
    out = Path(output_dir)
    files: dict[str, tuple[list[str], list]] = {}
    rounds, gan, deliveries = _rows(results)
    files["rounds.csv"] = (ROUNDS_COLUMNS, rounds)
    files["gan.csv"] = (GAN_COLUMNS, gan)
    files["deliveries.csv"] = (DELIVERY_COLUMNS, deliveries)
    if comparison is not None:
        files["comparison.csv"] = (COMPARISON_COLUMNS,
                                   [[c.scheme.value, c.seed, c.final_accuracy] for c in comparison.cells])
    if curve is not None:
        files["curve.csv"] = (CURVE_COLUMNS, [[p.count, p.median_accuracy] for p in curve])
    names = list(files) + ["manifest.json"]
    clash = [n for n in names if (out / n).exists()]
    if clash and not overwrite:
        raise FileExistsError(f"{out}: {', '.join(clash)} already exist (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    for name, (header, rows) in files.items():
        _write_csv(out / name, header, rows)
    manifest = {
        "command": command,
        "code_version": __version__,
        "seeds": list(config.seeds),
        "config": config.to_dict(),
        "files": names,
    }
    if comparison is not None:
        manifest["medians"] = {k.value: v for k, v in comparison.medians().items()}
        manifest["ordering_holds"] = comparison.ordering_holds()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [out / n for n in names]


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
