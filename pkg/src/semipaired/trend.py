"""Desk-scale trend experiment: semi-paired training vs the paired-only ablation.

Both variants share the dataset, split, held-out labels and every
hyper-parameter; only the unpaired phase differs. The comparison is the
median oracle mIoU over training seeds. Runs are resumable: finished runs are
skipped and interrupted ones continue from their latest checkpoint.

    python -m semipaired.trend --out runs/trend
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import evaluate
from .synthdata import SceneSpec, generate_corpus, split_dataset, write_dataset, write_split
from .trainer import Ablation, TrainConfig, run_training

logger = logging.getLogger(__name__)

VARIANTS = {"semi_paired": Ablation.NONE, "paired_only": Ablation.PAIRED_ONLY}


@dataclass
class TrendSetup:
    num_samples: int = 2000
    image_size: int = 64
    num_classes: int = 8
    ratio: float = 0.1
    iterations: int = 20000
    seeds: tuple[int, ...] = (0, 1, 2)
    val_samples: int = 200
    data_seed: int = 0
    val_seed: int = 1
    split_seed: int = 0
    eval_seed: int = 0
    checkpoint_interval: int = 1000
    train_overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["seeds"] = list(self.seeds)
        return d


def _prepare_data(setup: TrendSetup, root: Path) -> tuple[Path, Path]:
    spec = SceneSpec(image_size=setup.image_size, num_classes=setup.num_classes)
    data_dir, val_dir, split_dir = root / "data", root / "val", root / "split"
    if not (data_dir / "manifest.json").exists():
        write_dataset(generate_corpus(setup.num_samples, setup.data_seed, spec), spec, setup.data_seed, data_dir)
    if not (val_dir / "manifest.json").exists():
        # distinct corpus seed, so no scene is shared with the training data
        write_dataset(generate_corpus(setup.val_samples, setup.val_seed, spec), spec, setup.val_seed, val_dir)
    if not (split_dir / "split.json").exists():
        samples = generate_corpus(setup.num_samples, setup.data_seed, spec)
        write_split(split_dataset(samples, setup.ratio, setup.split_seed), data_dir, setup.split_seed, split_dir)
    return split_dir, val_dir


def _latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((run_dir / "checkpoints").glob("ckpt_*.ckpt"))
    return ckpts[-1] if ckpts else None


def run_trend(setup: TrendSetup, out_dir) -> dict:
    if setup.val_seed == setup.data_seed:
        raise ValueError("validation corpus seed must differ from the training corpus seed")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "setup.json").write_text(json.dumps(setup.to_dict(), indent=1) + "\n")
    split_dir, val_dir = _prepare_data(setup, root)

    results: dict[str, dict[int, dict]] = {v: {} for v in VARIANTS}
    for seed in setup.seeds:
        for variant, ablation in VARIANTS.items():
            run_dir = root / "runs" / f"{variant}_seed{seed}"
            report_path = run_dir / "eval.json"
            if not report_path.exists():
                cfg = TrainConfig(
                    total_iterations=setup.iterations,
                    seed=seed,
                    ablation=ablation,
                    checkpoint_interval=setup.checkpoint_interval,
                    **setup.train_overrides,
                )
                final = run_dir / "checkpoints" / "final.ckpt"
                if not final.exists():
                    t0 = time.time()
                    resume = _latest_checkpoint(run_dir)
                    logger.info("training %s seed %d (resume=%s)", variant, seed, resume)
                    final = run_training(cfg, split_dir, run_dir, resume=resume)
                    (run_dir / "wallclock.txt").write_text(f"{time.time() - t0:.1f}\n")
                evaluate(final, val_dir, seed=setup.eval_seed, out=report_path)
            report = json.loads(report_path.read_text())
            results[variant][seed] = {"miou": report["miou"], "frechet_distance": report["frechet_distance"]}
            logger.info("%s seed %d: mIoU %.4f, Fréchet %.3f", variant, seed, report["miou"], report["frechet_distance"])

    med = {v: statistics.median(r["miou"] for r in results[v].values()) for v in VARIANTS}
    summary = {
        "setup": setup.to_dict(),
        "per_seed": {v: {str(s): r for s, r in results[v].items()} for v in VARIANTS},
        "median_miou": med,
        "median_frechet": {
            v: statistics.median(r["frechet_distance"] for r in results[v].values()) for v in VARIANTS
        },
        "semi_paired_exceeds_paired_only": med["semi_paired"] > med["paired_only"],
    }
    (root / "results.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--iterations", type=int, default=TrendSetup.iterations)
    ap.add_argument("--num-samples", type=int, default=TrendSetup.num_samples)
    ap.add_argument("--val-samples", type=int, default=TrendSetup.val_samples)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(TrendSetup().seeds))
    ap.add_argument("--checkpoint-interval", type=int, default=TrendSetup.checkpoint_interval)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = TrendSetup(
        num_samples=args.num_samples,
        iterations=args.iterations,
        seeds=tuple(args.seeds),
        val_samples=args.val_samples,
        checkpoint_interval=args.checkpoint_interval,
    )
    summary = run_trend(setup, args.out)
    print(json.dumps({k: summary[k] for k in ("median_miou", "semi_paired_exceeds_paired_only")}, indent=1))


if __name__ == "__main__":
    main()
