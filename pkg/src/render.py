import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_loader import SAMPLING_RATE  # noqa: E402
from .errors import ShapeError  # noqa: E402
from .explain import Explanation  # noqa: E402


def _overlay(ax, signal: np.ndarray, heat: np.ndarray, sampling_rate: float, title: str) -> None:
    t = np.arange(signal.size) / sampling_rate
    lo, hi = float(signal.min()), float(signal.max())
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    ax.imshow(heat[None, :], aspect="auto", cmap="Reds", vmin=0.0, vmax=1.0, alpha=0.7,
              extent=(0.0, signal.size / sampling_rate, lo - pad, hi + pad), interpolation="nearest")
    ax.plot(t, signal, color="black", linewidth=0.6)
    ax.set_xlim(0.0, signal.size / sampling_rate)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_title(title, fontsize=9, loc="left")


def _save(fig, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg")
    except OSError as e:
        logging.error(f"Error writing figure {path}: {e}")
        raise OSError(f"cannot write figure to {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def render_explanation(signals: np.ndarray, explanation: Explanation, out_path,
                       lead_names: Sequence[str] = ("I", "II", "V1"), sampling_rate: float = SAMPLING_RATE,
                       class_name: Optional[str] = None) -> Path:
    """One panel per lead: the trace over a heatmap background proportional to M_i, alpha_i in the title."""
    signals = np.asarray(signals)
    if signals.shape != explanation.maps.shape:
        raise ShapeError(f"signal shape {signals.shape} does not match explanation maps {explanation.maps.shape}")
    fig, axes = plt.subplots(len(lead_names), 1, figsize=(12, 2.2 * len(lead_names)), sharex=True)
    for ax, name, signal, heat, a in zip(np.atleast_1d(axes), lead_names, signals, explanation.maps,
                                         explanation.alpha):
        _overlay(ax, signal, heat, sampling_rate, f"{name}   alpha={a:.3f}")
    np.atleast_1d(axes)[-1].set_xlabel("time (s)")
    label = class_name if class_name is not None else f"class {explanation.class_id}"
    fig.suptitle(f"{explanation.record_id or ''} {label}".strip(), fontsize=10)
    fig.tight_layout()
    return _save(fig, Path(out_path))


def render_sanity_comparison(signals: np.ndarray, original: Explanation, randomized: Explanation, out_path,
                             rhos: Optional[Sequence[float]] = None,
                             lead_names: Sequence[str] = ("I", "II", "V1"),
                             sampling_rate: float = SAMPLING_RATE) -> Path:
    """Side-by-side panels: original-model explanation left, randomized-classifier explanation right."""
    signals = np.asarray(signals)
    if signals.shape != original.maps.shape or signals.shape != randomized.maps.shape:
        raise ShapeError("signal and explanation shapes must all match")
    fig, axes = plt.subplots(len(lead_names), 2, figsize=(16, 2.2 * len(lead_names)), sharex=True, squeeze=False)
    for row, name in enumerate(lead_names):
        rho = f"   rho={rhos[row]:.3f}" if rhos is not None else ""
        _overlay(axes[row, 0], signals[row], original.maps[row], sampling_rate,
                 f"{name} original   alpha={original.alpha[row]:.3f}")
        _overlay(axes[row, 1], signals[row], randomized.maps[row], sampling_rate,
                 f"{name} randomized   alpha={randomized.alpha[row]:.3f}{rho}")
    fig.tight_layout()
    return _save(fig, Path(out_path))
