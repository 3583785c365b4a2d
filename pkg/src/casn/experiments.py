"""Desk-scale ablation runs on the synthetic set and the shipped reference record."""

from __future__ import annotations

import time
from importlib import resources
from pathlib import Path

from . import data
from .cli import evaluate_model, load_split
from .config import RunConfig
from .evaluation import read_results, write_results
from .training import train

# (enable_ia, enable_sa) for each row of the ablation table
ABLATIONS = {
    "baseline": (False, False),
    "ia": (True, False),
    "sa": (False, True),
    "full": (True, True),
}


def shipped_config(name="synthetic"):
    text = resources.files("casn").joinpath("configs", f"{name}.ini").read_text()
    return RunConfig.from_ini(text)


def reference_path():
    return resources.files("casn").joinpath("reference", "synthetic_reference.txt")


def read_reference():
    return read_results(reference_path())


def ensure_synthetic(config, root):
    """Generate the synthetic set under ``root`` unless a manifest is already there."""
    root = Path(root)
    if not (root / "manifest.csv").is_file():
        data.generate_synthetic(root, config.synth_identities, config.synth_images_per_identity,
                                config.image_size, config.seed, config.synth_cameras)
    return config.replace(dataset_root=str(root))


def run_config(config, mode=None):
    """Train without writing files and evaluate; returns a flat record."""
    start = time.perf_counter()
    result = train(config, write_files=False)
    query = load_split(config, "query")
    gallery = load_split(config, "gallery", config.max_gallery)
    metrics, _, _ = evaluate_model(result.model, config, mode or config.eval_mode, query, gallery)
    last = result.history[-1]
    return {
        "rank1": float(metrics["rank1"]),
        "mAP": float(metrics["mAP"]),
        "final_loss": last["total"],
        "consistency": last["consistency"],
        "epochs": len(result.history),
        "seconds": time.perf_counter() - start,
        "history": result.history,
    }


def run_ablation(config, names=tuple(ABLATIONS), progress=None):
    records = {}
    for name in names:
        ia, sa = ABLATIONS[name]
        records[name] = run_config(config.replace(enable_ia=ia, enable_sa=sa))
        if progress is not None:
            progress(name, records[name])
    return records


def write_reference(path, config, record):
    write_results(path, {
        "config_fingerprint": config.fingerprint(),
        "seed": config.seed,
        "epochs": record["epochs"],
        "rank1": f"{record['rank1']:.6f}",
        "mAP": f"{record['mAP']:.6f}",
        "final_loss": f"{record['final_loss']:.8g}",
        "consistency": f"{record['consistency']:.8g}",
    })


if __name__ == "__main__":
    import argparse
    import tempfile

    parser = argparse.ArgumentParser(description="regenerate the shipped reference record")
    parser.add_argument("--output", type=Path, default=None)
    args = parser.parse_args()
    cfg = shipped_config()
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ensure_synthetic(cfg, tmp)
        rec = run_config(cfg)
    write_reference(args.output or Path(str(reference_path())), cfg.replace(dataset_root=shipped_config().dataset_root), rec)
    print({k: v for k, v in rec.items() if k != "history"})
