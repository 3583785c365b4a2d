"""Command line entry point: ``casn {train,eval,export-attention,generate}``.

Every command reads ``--config <file>`` and accepts repeated
``--set key=value`` overrides. Failures exit non-zero with a single
``error[<category>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, export
from .config import ConfigError, RunConfig
from .training import CheckpointError, load_checkpoint, seed_everything, train

log = logging.getLogger("casn")


def load_split(config, split, limit=0):
    samples = data.split_samples(data.scan_dataset(config.dataset_root), split)
    if limit:
        samples = samples[:limit]
    return data.ImageSet(samples, config.image_size)


def cmd_train(config, output_dir=None):
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.ini")
    result = train(config, output_dir=out)
    log.info("checkpoint written to %s", result.checkpoint)
    return result


def evaluate_model(model, config, mode, query=None, gallery=None):
    """Rank the query split against the gallery split; returns (metrics, dm, ranking)."""
    seed_everything(config.seed)
    if query is None:
        query = load_split(config, "query")
    if gallery is None:
        gallery = load_split(config, "gallery", config.max_gallery)
    model.eval()
    dm = evaluation.fused_distances(
        model, query.images, gallery.images, query.identities, gallery.identities,
        query.cameras, gallery.cameras, mode=mode, threshold=config.trim_threshold,
        length=config.align_length or None,
        weights=(config.fusion_feature_weight, config.fusion_attention_weight),
    )
    ranking = evaluation.rank(dm, max_rank=max(config.max_rank, 10))
    metrics = {
        "mode": mode,
        "rank1": f"{ranking.cmc[0]:.6f}",
        "rank5": f"{ranking.cmc[4]:.6f}",
        "rank10": f"{ranking.cmc[9]:.6f}",
        "mAP": f"{ranking.mean_ap:.6f}",
        "num_query": len(query),
        "num_gallery": len(gallery),
        "num_valid_query": ranking.num_valid,
        "num_excluded_query": ranking.num_excluded,
    }
    return metrics, dm, ranking


def cmd_eval(checkpoint, config, mode=None, output_dir=None):
    mode = mode or config.eval_mode
    model, _ = load_checkpoint(checkpoint, config)
    metrics, dm, ranking = evaluate_model(model, config, mode)
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_results(out / f"results_{mode}.txt", metrics)
    evaluation.save_distance_matrix(dm, out / f"distances_{mode}")
    plot_cmc(out / f"cmc_{mode}.png", ranking.cmc)
    print(f"[{mode}] rank-1 {float(metrics['rank1']):.2%}  rank-5 {float(metrics['rank5']):.2%}  "
          f"rank-10 {float(metrics['rank10']):.2%}  mAP {float(metrics['mAP']):.2%}  "
          f"({ranking.num_valid} queries, {ranking.num_excluded} excluded)")
    return metrics


def plot_cmc(path, curve):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.arange(1, len(curve) + 1), curve, marker=".")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_export_attention(checkpoint, config, images, label=None, output_dir=None):
    """Export Siamese maps for two images, or the identity map for one image + label."""
    for p in images:
        if not Path(p).is_file():
            raise FileNotFoundError(f"image not found: {p}")
    model, _ = load_checkpoint(checkpoint, config)
    out = Path(output_dir or Path(config.output_dir) / "attention")
    tensors = [data.load_image(p, config.image_size).to(config.dtype) for p in images]
    if len(images) == 2:
        return export.export_pair(model, tensors[0], tensors[1], images[0], images[1], out,
                                  config.trim_threshold, config.align_length or None)
    if len(images) == 1:
        if label is None:
            raise ValueError("a single image needs --label for identification attention")
        return export.export_identification(model, tensors[0], images[0], label, out)
    raise ValueError("export-attention takes one image (with --label) or two images")


def cmd_generate(config, root=None):
    root = root or config.dataset_root
    rows = data.generate_synthetic(root, config.synth_identities, config.synth_images_per_identity,
                                   config.image_size, config.seed, config.synth_cameras)
    print(f"wrote {len(rows)} images to {root}")
    return rows


def build_parser():
    parser = argparse.ArgumentParser(prog="casn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="INI config file (defaults if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--output-dir", type=Path)
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="train a model"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=evaluation.MODES)
    p = sub.add_parser("export-attention", help="write attention maps and overlays")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", dest="images", action="append", required=True)
    p.add_argument("--label", type=int)
    p = sub.add_parser("generate", help="write the synthetic dataset")
    common(p)
    p.add_argument("--root", type=Path)
    return parser


def _load_config(args):
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        return RunConfig.load(args.config, args.overrides)
    return RunConfig.from_ini("", args.overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        config = _load_config(args)
        if args.command == "train":
            cmd_train(config, args.output_dir)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, config, args.mode, args.output_dir)
        elif args.command == "export-attention":
            files = cmd_export_attention(args.checkpoint, config, args.images, args.label, args.output_dir)
            for f in files:
                print(f)
        elif args.command == "generate":
            cmd_generate(config, args.root)
    except ConfigError as exc:
        return _fail("config", exc)
    except CheckpointError as exc:
        return _fail("checkpoint", exc)
    except data.DatasetError as exc:
        return _fail("data", exc)
    except (OSError, FileNotFoundError) as exc:
        return _fail("io", exc)
    except (ValueError, RuntimeError) as exc:
        return _fail("runtime", exc)
    return 0


def _fail(category, exc):
    print(f"error[{category}]: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
