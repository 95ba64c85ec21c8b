"""Directional STL-vs-MTL experiment on the synthetic pair.

Trains both systems for every seed at a small and a large primary train
size, writes one run directory per (size, mode, seed) and a comparison
table through the ``compare`` subcommand::

    python -m mtlforge.experiments runs/directional
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import cli
from .config import DataConfig, ExperimentConfig, prepare_data, run_experiment
from .data import REPORTING_SEEDS, save_dataset, synth_generate
from .encoder import EncoderConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

SIZES = (150, 2000)
SYNTH_N = 2500
SYNTH_SEED = 7
CORRELATION = 0.9


def directional(
    out_dir: str | Path,
    sizes: Sequence[int] = SIZES,
    seeds: Sequence[int] = REPORTING_SEEDS,
    n: int = SYNTH_N,
    correlation: float = CORRELATION,
    lam: float = 0.7,
) -> dict:
    """Run the experiment and return ``{size: {"stl": mean, "mtl": mean, "gap": mtl - stl}}``."""
    out = Path(out_dir)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    primary, auxiliary = synth_generate(n, vocab_words=400, seed=SYNTH_SEED, correlation=correlation)
    save_dataset(primary, data_dir / "primary.jsonl")
    save_dataset(auxiliary, data_dir / "auxiliary.jsonl")

    summary = {}
    for size in sizes:
        reports: dict[str, list[str]] = {"stl": [], "mtl": []}
        scores: dict[str, list[float]] = {"stl": [], "mtl": []}
        for seed in seeds:
            base = ExperimentConfig(
                data=DataConfig(
                    primary=str(data_dir / "primary.jsonl"),
                    auxiliary=str(data_dir / "auxiliary.jsonl"),
                    primary_train_limit=size,
                    name=f"synth-{size}",
                ),
                encoder=EncoderConfig(max_len=16),
                train=TrainConfig(mode="mtl", seed=seed, lam=lam),
            )
            # Both systems see the same splits and vocabulary for a given seed.
            data = prepare_data(base)
            for mode in ("stl", "mtl"):
                run_dir = out / f"size{size}" / mode / str(seed)
                cfg = replace(base, train=replace(base.train, mode=mode), output_dir=str(run_dir))
                _, report, _ = run_experiment(cfg, data)
                reports[mode].append(str(run_dir / "report.json"))
                scores[mode].append(report.primary_test_macro_f1)
                logger.info("size %d %s seed %d: test macro-F1 %.4f", size, mode, seed, scores[mode][-1])
        code = cli.main(["compare", "--stl", *reports["stl"], "--mtl", *reports["mtl"],
                         "--out", str(out / f"size{size}")])
        if code != cli.EXIT_OK:
            raise RuntimeError(f"compare failed with exit code {code}")
        stl, mtl = statistics.mean(scores["stl"]), statistics.mean(scores["mtl"])
        summary[size] = {"stl": stl, "mtl": mtl, "gap": mtl - stl}

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="output directory")
    parser.add_argument("--sizes", type=int, nargs="+", default=list(SIZES), help="primary train sizes")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.7, help="primary loss weight")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("mtlforge.trainer").setLevel(logging.WARNING)
    summary = directional(args.out, args.sizes, lam=args.lam)
    for size, row in summary.items():
        print(f"size {size}: STL {row['stl']:.4f}  MTL {row['mtl']:.4f}  gap {row['gap']:+.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
