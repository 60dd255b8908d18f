"""Command-line entry point.

    semipaired synth --n 2000 --seed 0 --out data/
    semipaired split --data data/ --ratio 0.1 --seed 0 --out split/
    semipaired stats --split split/
    semipaired train --config train.cfg --data split/ --out runs/a
    semipaired eval  --ckpt runs/a/checkpoints/final.ckpt --data val/ --seed 0 --out runs/a/eval
    semipaired infer --ckpt runs/a/checkpoints/final.ckpt --label val/labels/000000.png --seed 0 --out x.png

Exit codes: 0 ok, 2 usage or configuration error, 3 data error, 4 non-finite loss.
Every command writes a ``*.resolved.json`` file recording its fully resolved
arguments next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .core import (
    ConfigError,
    DataError,
    NumericError,
    ValidationError,
    encode_one_hot,
    labels_to_tensor,
    load_label_png,
    save_image_png,
    tensor_to_images,
)
from .metrics import EVAL_EXTRACTOR_SEED, evaluate, generate_for_labels
from .sampling import class_pixel_stats, rare_class_probabilities
from .synthdata import (
    SceneSpec,
    file_sha256,
    generate_corpus,
    load_dataset,
    load_split,
    split_dataset,
    write_dataset,
    write_split,
)
from .trainer import load_config, load_generator, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_resolved(path: Path, command: str, args: dict) -> None:
    resolved = {"command": command, "version": __version__}
    for k, v in args.items():
        resolved[k] = str(Path(v).resolve()) if isinstance(v, Path) else v
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")


def _load_spec(path) -> SceneSpec:
    if path is None:
        return SceneSpec()
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read scene spec {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"scene spec {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"scene spec {path} must be a JSON object")
    return SceneSpec.from_dict(d)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = _load_spec(args.spec)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = Path(args.out)
    write_dataset(generate_corpus(args.n, args.seed, spec), spec, args.seed, out)
    _write_resolved(out / "synth.resolved.json", "synth", {"n": args.n, "seed": args.seed, "spec": spec.to_dict(), "out": out})
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    samples, _, manifest = load_dataset(args.data)
    ordered = [samples[i] for i in manifest["ids"]]
    split = split_dataset(ordered, args.ratio, args.seed)
    out = Path(args.out)
    write_split(split, args.data, args.seed, out)
    _write_resolved(
        out / "split.resolved.json", "split", {"data": Path(args.data), "ratio": args.ratio, "seed": args.seed, "out": out}
    )
    print(f"N^p = {split.num_paired}, N^up = {split.num_unpaired} (r = {args.ratio})")
    return EXIT_OK


def cmd_stats(args) -> int:
    split, spec, _ = load_split(args.split)
    stats = class_pixel_stats(split.paired, spec.num_classes)
    p = rare_class_probabilities(stats)
    C = spec.num_classes
    header = f"{'id':>8} " + " ".join(f"{'c' + str(c):>6}" for c in range(C)) + f" {'p_i':>10}"
    print(header)
    for i, sid in enumerate(stats.ids):
        print(f"{sid:>8} " + " ".join(f"{int(v):>6}" for v in stats.per_image[i]) + f" {p[i]:>10.6f}")
    print(f"{'total':>8} " + " ".join(f"{int(v):>6}" for v in stats.per_dataset))
    out = Path(args.out) if args.out else Path(args.split) / "stats.json"
    report = {
        "num_classes": C,
        "per_dataset": stats.per_dataset.tolist(),
        "images": {
            sid: {"pixels": stats.per_image[i].tolist(), "present": stats.presence[i].tolist(), "p": float(p[i])}
            for i, sid in enumerate(stats.ids)
        },
        "split_sha256": file_sha256(Path(args.split) / "split.json"),
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n")
    _write_resolved(out.with_name(out.stem + ".resolved.json"), "stats", {"split": Path(args.split), "out": out})
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config is None and args.resume is None:
        raise ConfigError("--config is required unless --resume is given")
    cfg = load_config(args.config) if args.config is not None else None
    out = Path(args.out)
    resolved = {"data": Path(args.data), "out": out, "resume": Path(args.resume) if args.resume else None}
    resolved["config_file"] = str((out / "config.resolved.txt").resolve())
    _write_resolved(out / "train.resolved.json", "train", resolved)
    final = run_training(cfg, args.data, out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    report = evaluate(args.ckpt, args.data, seed=args.seed, extractor_seed=args.extractor_seed, out=out / "eval.json")
    _write_resolved(
        out / "eval.resolved.json",
        "eval",
        {"ckpt": Path(args.ckpt), "data": Path(args.data), "seed": args.seed, "extractor_seed": args.extractor_seed, "out": out},
    )
    print(f"mIoU {report.miou:.4f}  Fréchet feature distance {report.frechet_distance:.4f}  ({report.extractor_id})")
    return EXIT_OK


def cmd_infer(args) -> int:
    G, _ = load_generator(args.ckpt)
    label = load_label_png(args.label, G.num_classes)
    if label.height != G.image_size or label.width != G.image_size:
        raise DataError(f"label map is {label.height}x{label.width}, the generator expects {G.image_size}x{G.image_size}")
    m = labels_to_tensor([encode_one_hot(label)])
    img = tensor_to_images(generate_for_labels(G, m, args.seed))[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(img, out)
    _write_resolved(
        out.with_name(out.stem + ".resolved.json"),
        "infer",
        {"ckpt": Path(args.ckpt), "label": Path(args.label), "seed": args.seed, "out": out},
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semipaired", description="Semi-paired semantic image synthesis toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--spec", help="JSON file with scene spec fields (defaults if omitted)")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split a dataset into paired and unpaired pools")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, required=True, help="supervision ratio r = N^p / N")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="class pixel statistics and rare-class sampling probabilities")
    p.add_argument("--split", required=True)
    p.add_argument("--out", help="JSON output (default: <split>/stats.json)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train on a split")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="oracle mIoU and Fréchet feature distance on a held-out dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="held-out dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extractor-seed", type=int, default=EVAL_EXTRACTOR_SEED)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="generate one image from a label map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--label", required=True, help="single-channel PNG of class indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"semipaired {args.cmd}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"semipaired {args.cmd}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"semipaired {args.cmd}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
