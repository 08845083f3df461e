"""Figures built only from files the other commands write (no model access).

Needs the optional ``plot`` extra (matplotlib, scikit-learn for t-SNE).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ValidationError

LOSS_KEYS = ("l_total", "l_det", "l_ria", "l_msia", "l_mlcr")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None, "Creator": None}
    fig.savefig(path, metadata=meta)
    return path


def read_metrics(path) -> tuple[list[dict], list[dict]]:
    losses, evals = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            (evals if "eval" in rec else losses).append(rec)
    return losses, evals


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if len(y) < window or window <= 1:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_metrics(path, out_dir, fmt: str = "png") -> list[Path]:
    plt = _pyplot()
    losses, evals = read_metrics(path)
    if not losses and not evals:
        raise ValidationError(f"{path} holds no metrics")
    stem = Path(path).parent.name or Path(path).stem
    written = []
    if losses:
        fig, ax = plt.subplots(figsize=(7, 4))
        steps = np.array([r["step"] for r in losses])
        window = max(1, len(losses) // 50)
        for k in LOSS_KEYS:
            y = np.array([r[k] for r in losses])
            if not np.any(y):
                continue
            ys = _smooth(y, window)
            ax.plot(steps[len(steps) - len(ys):], ys, label=k)
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        written.append(_save(fig, Path(out_dir) / f"{stem}_losses.{fmt}"))
        plt.close(fig)
    if evals:
        fig, ax = plt.subplots(figsize=(7, 4))
        for name in evals[0]["eval"]:
            ax.plot([r["step"] for r in evals], [r["eval"][name] for r in evals], marker="o", label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("mAP@0.5")
        ax.set_ylim(0, 1)
        ax.legend()
        written.append(_save(fig, Path(out_dir) / f"{stem}_map.{fmt}"))
        plt.close(fig)
    return written


def plot_pr(path, out_dir, fmt: str = "png") -> list[Path]:
    plt = _pyplot()
    doc = json.loads(Path(path).read_text())
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, c in doc["curves"].items():
        ax.step(c["recall"], c["precision"], where="post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(doc.get("split", ""))
    ax.legend()
    out = _save(fig, Path(out_dir) / f"{Path(path).stem}_pr.{fmt}")
    plt.close(fig)
    return [out]


def embed(vectors: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """2-D projection of the rows of ``vectors``."""
    x = vectors - vectors.mean(axis=0)
    if method == "pca" or len(x) < 5:
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        return x @ vt[:2].T
    from sklearn.manifold import TSNE

    perplexity = min(30.0, (len(x) - 1) / 3)
    return TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)


def plot_embedding(path, out_dir, fmt: str = "png", method: str = "tsne", seed: int = 0) -> list[Path]:
    from .evaluation import read_feature_table

    plt = _pyplot()
    records = read_feature_table(path)
    if not records:
        raise ValidationError(f"{path} holds no feature records")
    scales = sorted({r.scale_index for r in records})
    fig, axes = plt.subplots(1, len(scales), figsize=(4 * len(scales), 4), squeeze=False)
    for ax, k in zip(axes[0], scales):
        rows = [r for r in records if r.scale_index == k]
        pts = embed(np.stack([r.vector for r in rows]), method, seed)
        dom = np.array([r.domain for r in rows])
        for d, color, label in ((0, "tab:blue", "source"), (1, "tab:red", "target")):
            ax.scatter(pts[dom == d, 0], pts[dom == d, 1], s=6, c=color, label=label)
        ax.set_title(f"scale {k} ({method})")
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][0].legend()
    out = _save(fig, Path(out_dir) / f"{Path(path).stem}_{method}.{fmt}")
    plt.close(fig)
    return [out]
