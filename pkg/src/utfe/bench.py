"""Experiment harness: evaluate trained extractors on a test corpus and
run multi-row comparison experiments into a machine-readable report.

An experiment spec is a flat key=value text file. Keys before the first
"[row]" header configure the corpus and evaluation; each "[row]" section
describes one extractor to train and score. Rows are evaluated in spec
order and the report preserves that order.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import (NoiseConfig, SynthConfig, corrupt_with_rng, generate_synthetic,
                   load_corpus, split)
from .extractors import (ExtractorModel, FeatureSize, TrainConfig, build_extractor,
                         train)
from .signal import cw_ssim, mse
from .tensor import Rng

EVAL_CHUNK = 32  # keeps conv im2col transients small


def reconstruct_dataset(model: ExtractorModel, inputs: np.ndarray) -> np.ndarray:
    """Reconstruction of every image: decode(encode(x)), stacked [N,H,W]."""
    if model.kind == "dct":
        return np.stack([model.reconstruct(model.encode(im)) for im in inputs])
    layers = model.layers()
    out = []
    for start in range(0, inputs.shape[0], EVAL_CHUNK):
        x = model._net_batch(inputs[start:start + EVAL_CHUNK])
        for layer in layers:
            x, _ = layer.forward(x)
        out.append(x[:, 0] if model.kind in ("cae", "dcae") else x)
    return np.concatenate(out)


def evaluate_extractor(model: ExtractorModel, clean: np.ndarray, noisy: bool = False,
                       sigma: float = 0.2, seed: int = 0,
                       with_cw_ssim: bool = True) -> dict:
    """Per-image MSE (8-bit scale) and CW-SSIM of reconstructions.

    With noisy=True the model sees speckle-corrupted inputs while both
    metrics still compare the reconstruction against the clean original.
    """
    clean = np.asarray(clean)
    if noisy:
        inputs = corrupt_with_rng(clean, sigma, Rng(seed))
    else:
        inputs = clean
    recon = reconstruct_dataset(model, inputs)
    diff = (recon.astype(np.float64) - clean.astype(np.float64)) * 255.0
    mse_values = (diff * diff).reshape(clean.shape[0], -1).mean(axis=1)
    cw_values = None
    if with_cw_ssim:
        cw_values = np.array([cw_ssim(a, b) for a, b in zip(clean, recon)])
    return {"mse": mse_values, "cw_ssim": cw_values}


# ---------------------------------------------------------------------------
# Experiment specs

@dataclass
class CompareRow:
    kind: str
    features: FeatureSize
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 64
    sigma: float = 0.2
    seed: int = 1
    target: str = "clean"


@dataclass
class ExperimentSpec:
    rows: list[CompareRow] = field(default_factory=list)
    data_dir: str | None = None
    synth_count: int = 3200
    synth_seed: int = 7
    synth_sigma: float = 0.5
    train_fraction: float = 0.625
    split_seed: int = 0
    eval_noisy: bool = False
    eval_sigma: float = 0.2
    eval_seed: int = 0


_GLOBAL_KEYS = {
    "data": ("data_dir", str),
    "synth_count": ("synth_count", int),
    "synth_seed": ("synth_seed", int),
    "synth_sigma": ("synth_sigma", float),
    "train_fraction": ("train_fraction", float),
    "split_seed": ("split_seed", int),
    "eval_sigma": ("eval_sigma", float),
    "eval_seed": ("eval_seed", int),
}

_ROW_KEYS = {
    "kind": ("kind", str),
    "features": ("features", FeatureSize.parse),
    "epochs": ("epochs", int),
    "lr": ("learning_rate", float),
    "batch": ("batch_size", int),
    "sigma": ("sigma", float),
    "seed": ("seed", int),
    "target": ("target", str),
}


def parse_experiment_spec(path) -> ExperimentSpec:
    """Parse a flat key=value spec with [row] section headers."""
    spec = ExperimentSpec()
    current: dict | None = None
    pending_rows: list[dict] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[row]":
                current = {}
                pending_rows.append(current)
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                if current is None:
                    if key == "eval":
                        if value not in ("clean", "noisy"):
                            raise ValueError(f"eval must be clean|noisy, got {value!r}")
                        spec.eval_noisy = value == "noisy"
                    elif key in _GLOBAL_KEYS:
                        attr, conv = _GLOBAL_KEYS[key]
                        setattr(spec, attr, conv(value))
                    else:
                        raise ValueError(f"unknown global key {key!r}")
                else:
                    if key not in _ROW_KEYS:
                        raise ValueError(f"unknown row key {key!r}")
                    attr, conv = _ROW_KEYS[key]
                    current[attr] = conv(value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    for i, fields in enumerate(pending_rows, 1):
        for required in ("kind", "features"):
            if required not in fields:
                raise ValueError(f"{path}: row {i} is missing {required!r}")
        spec.rows.append(CompareRow(**fields))
    if not spec.rows:
        raise ValueError(f"{path}: experiment spec has no [row] sections")
    if not (0.0 < spec.train_fraction < 1.0):
        raise ValueError(f"{path}: train_fraction must be in (0,1)")
    if spec.data_dir is not None and not os.path.isdir(spec.data_dir):
        raise ValueError(f"{path}: data directory {spec.data_dir!r} does not exist")
    return spec


def load_experiment_corpus(spec: ExperimentSpec):
    """Train/test arrays for a spec: loaded from disk or generated."""
    if spec.data_dir is not None:
        images = load_corpus(spec.data_dir)
    else:
        images = generate_synthetic(SynthConfig(
            seed=spec.synth_seed, count=spec.synth_count,
            background_speckle=spec.synth_sigma))
    return split(images, spec.train_fraction, spec.split_seed)


def run_compare(spec: ExperimentSpec, timing: str = "none", log=None) -> list[dict]:
    """Train and evaluate every row; returns report rows in spec order.

    timing="wall" records measured training wall time per row; the
    default "none" reports 0.0 so repeated runs emit byte-identical
    reports.
    """
    if timing not in ("none", "wall"):
        raise ValueError(f"timing must be none|wall, got {timing!r}")
    train_images, test_images = load_experiment_corpus(spec)
    report = []
    for i, row in enumerate(spec.rows, 1):
        label = f"row {i} ({row.kind} {row.features})"
        if log:
            log(f"{label}: training on {train_images.shape[0]} images")
        try:
            model = build_extractor(row.kind, row.features, test_images.shape[1:])
            seconds = 0.0
            if row.kind != "dct":
                noise = (NoiseConfig(sigma=row.sigma, seed=row.seed)
                         if row.kind in ("dae", "dcae") else None)
                config = TrainConfig(learning_rate=row.learning_rate,
                                     epochs=row.epochs, batch_size=row.batch_size,
                                     seed=row.seed, noise=noise,
                                     denoising_target=row.target)
                started = time.perf_counter()
                train(model, train_images, config)
                seconds = time.perf_counter() - started
            scores = evaluate_extractor(model, test_images, noisy=spec.eval_noisy,
                                        sigma=spec.eval_sigma, seed=spec.eval_seed)
        except (ValueError, RuntimeError) as exc:
            raise RuntimeError(f"{label} failed: {exc}") from exc
        report.append({
            "kind": row.kind,
            "features": str(row.features),
            "K": row.features.length,
            "mse": float(scores["mse"].mean()),
            "cw_ssim": float(scores["cw_ssim"].mean()),
            "train_seconds": seconds if timing == "wall" else 0.0,
            "seed": row.seed,
        })
        if log:
            log(f"{label}: mse={report[-1]['mse']:.4f} "
                f"cw_ssim={report[-1]['cw_ssim']:.4f} ({seconds:.1f}s)")
    return report


REPORT_COLUMNS = ("kind", "features", "K", "mse", "cw_ssim", "train_seconds", "seed")


def _cell(row: dict, column: str) -> str:
    value = row[column]
    if column in ("mse", "cw_ssim"):
        return f"{value:.6f}"
    if column == "train_seconds":
        return f"{value:.3f}"
    return str(value)


def format_report_csv(report: list[dict]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    lines += [",".join(_cell(row, c) for c in REPORT_COLUMNS) for row in report]
    return "\n".join(lines) + "\n"


def format_report_table(report: list[dict]) -> str:
    cells = [list(REPORT_COLUMNS)]
    cells += [[_cell(row, c) for c in REPORT_COLUMNS] for row in report]
    widths = [max(len(line[i]) for line in cells) for i in range(len(REPORT_COLUMNS))]
    out = []
    for j, line in enumerate(cells):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
