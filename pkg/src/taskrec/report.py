"""Metrics, evaluation over datasets, and table/figure emission.

Everything here is a pure function of its inputs: CSV cells use 6
significant digits, plot files carry no timestamps, and wall time lives in
a metadata column only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "taskrec"
import matplotlib.pyplot as plt

from .tensor import Tensor
from .training import JointModel, joint_loss_parts

__all__ = ["MetricsRow", "accuracy", "pixel_accuracy", "emit_table",
           "read_table", "emit_plots", "emit_image_grid",
           "evaluate_classification", "evaluate_segmentation"]


@dataclass
class MetricsRow:
    """One line of the final results table."""

    regime: str
    C: float
    accuracy_or_pixacc: float
    l2_loss: float
    cross_entropy: float
    steps: int = 0
    seed: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if np.isfinite(self.accuracy_or_pixacc) and \
                not 0.0 <= self.accuracy_or_pixacc <= 1.0:
            raise ValueError(
                f"accuracy must be a fraction, got {self.accuracy_or_pixacc}")
        for name in ("l2_loss", "cross_entropy"):
            v = getattr(self, name)
            if np.isfinite(v) and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


def accuracy(preds, labels) -> float:
    """Fraction of argmax predictions equal to the labels.

    Ties resolve to the lowest class index.  ``preds`` is (N, k) (or a
    single (k,) row); an empty batch is rejected.
    """
    p = preds.data if isinstance(preds, Tensor) else np.asarray(preds)
    if p.ndim == 1:
        p = p[None]
    labels = np.atleast_1d(np.asarray(labels))
    if p.shape[0] == 0:
        raise ValueError("accuracy of an empty batch")
    if p.shape[0] != labels.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions vs {labels.shape[0]} labels")
    return float(np.mean(np.argmax(p, axis=1) == labels))


def pixel_accuracy(pred, mask) -> float:
    """Fraction of pixels where (pred >= 0.5) matches the binary mask."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if p.shape != m.shape:
        raise ValueError(f"prediction {p.shape} vs mask {m.shape}")
    return float(np.mean((p >= 0.5) == (m >= 0.5)))


_COLUMNS = ["regime", "C", "accuracy_or_pixacc", "l2_loss", "cross_entropy",
            "steps", "seed", "wall_time"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def emit_table(rows: list[MetricsRow], path) -> Path:
    """Write the metrics table as CSV with a stable column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_COLUMNS)
            for row in rows:
                d = asdict(row)
                writer.writerow([_fmt(d[c]) for c in _COLUMNS])
    except OSError as e:
        raise OSError(f"cannot write metrics table to {path}: {e}") from e
    return path


def read_table(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricsRow(
                regime=rec["regime"], C=float(rec["C"]),
                accuracy_or_pixacc=float(rec["accuracy_or_pixacc"]),
                l2_loss=float(rec["l2_loss"]),
                cross_entropy=float(rec["cross_entropy"]),
                steps=int(rec["steps"]), seed=int(rec["seed"]),
                wall_time=float(rec["wall_time"])))
    return rows


def _savefig(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(sweep_rows: list[dict], out_dir, log_axes: bool = False
               ) -> list[Path]:
    """Loss-versus-C figures from sweep rows ({"C", "d_x", "d_d"}).

    With ``log_axes`` both axes are logarithmic (the segmentation sweep
    convention); outputs are deterministic SVG files.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create plot directory {out_dir}: {e}") from e
    cs = [r["C"] for r in sweep_rows]
    paths = []
    for key, label, fname in (("d_x", "reconstruction loss", "loss_vs_C_reconstruction.svg"),
                              ("d_d", "task loss", "loss_vs_C_task.svg")):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.plot(cs, [r[key] for r in sweep_rows], "o-")
        ax.set_xlabel("C")
        ax.set_ylabel(label)
        if log_axes:
            ax.set_xscale("log")
            ax.set_yscale("log")
        fig.tight_layout()
        path = out_dir / fname
        _savefig(fig, path)
        paths.append(path)
    return paths


def emit_image_grid(images: np.ndarray, titles, path, ncols: int = 4) -> Path:
    """Grayscale image grid (reconstructions, probability maps) as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(images)
    ncols = min(ncols, max(n, 1))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols,
                             figsize=(2.4 * ncols, 2.6 * nrows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, img, title in zip(axes, images, titles):
        ax.imshow(np.asarray(img), cmap="gray", interpolation="nearest")
        ax.set_title(str(title), fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)
    return path


# ---------------------------------------------------------------------------
# dataset-level evaluation


def evaluate_classification(model: JointModel, source, split: str = "test",
                            batch: int = 256, max_items: int | None = None,
                            C: float = 0.5) -> dict:
    """Accuracy, mean reconstruction loss, and cross entropy on a split.

    Measurements use the source's fixed evaluation seed, so repeated calls
    are identical.
    """
    images, labels = source.arrays(split)
    if max_items:
        images, labels = images[:max_items], labels[:max_items]
    n = images.shape[0]
    hits = l2 = ce = 0.0
    for lo in range(0, n, batch):
        xs = images[lo:lo + batch]
        zs = labels[lo:lo + batch]
        y = source.measure(xs)
        x_hat = model.recon_forward(y, model.theta).detach()
        d_hat = model.task_forward(x_hat, model.vartheta)
        _, rec, task = joint_loss_parts(Tensor(xs), x_hat, zs, d_hat, C,
                                        model.task_loss)
        w = xs.shape[0]
        hits += accuracy(d_hat, zs) * w
        l2 += rec.item() * w
        ce += task.item() * w
    return {"accuracy": hits / n, "l2_loss": l2 / n, "cross_entropy": ce / n,
            "count": n}


def evaluate_segmentation(model: JointModel, source, split: str = "test",
                          batch: int = 4, max_items: int | None = None,
                          C: float = 0.5) -> dict:
    """Pixel accuracy, mean reconstruction loss, and cross entropy."""
    images, masks = source.arrays(split)
    if max_items:
        images, masks = images[:max_items], masks[:max_items]
    n = images.shape[0]
    pix = l2 = ce = 0.0
    for lo in range(0, n, batch):
        xs = images[lo:lo + batch]
        ms = masks[lo:lo + batch]
        y = source.measure(xs)
        x_hat = model.recon_forward(y, model.theta).detach()
        d_hat = model.task_forward(x_hat, model.vartheta)
        _, rec, task = joint_loss_parts(Tensor(xs), x_hat, ms, d_hat, C,
                                        model.task_loss)
        w = xs.shape[0]
        pix += pixel_accuracy(d_hat, ms) * w
        l2 += rec.item() * w
        ce += task.item() * w
    return {"pixel_accuracy": pix / n, "l2_loss": l2 / n,
            "cross_entropy": ce / n, "count": n}
