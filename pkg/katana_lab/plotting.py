"""Curve rendering for the N ablation CSV."""

from collections import defaultdict
from pathlib import Path
from typing import Union

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .results import read_csv  # noqa: E402


def plot_n_curve(csv_path: Union[str, Path], out_path: Union[str, Path]) -> Path:
    """Mean accuracy against N on a log axis, one line per defense, shaded one std either side."""
    series = defaultdict(list)
    for row in read_csv(csv_path):
        series[(row["attack"], row["defense"])].append(
            (int(row["n"]), float(row["mean_accuracy"]), float(row["std_accuracy"])))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (attack, defense), points in sorted(series.items()):
        points.sort()
        n = [p[0] for p in points]
        mean = [p[1] for p in points]
        lo = [p[1] - p[2] for p in points]
        hi = [p[1] + p[2] for p in points]
        ax.fill_between(n, lo, hi, alpha=0.25)
        ax.plot(n, mean, "o-", linewidth=2, markersize=4, label=f"{defense} / {attack}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("TTA count N")
    ax.set_ylabel("adversarial accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def save_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    """One (H, W, C) image in [0, 1] as PNG; values outside the range are clipped."""
    path = Path(path)
    plt.imsave(path, np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0))
    return path
