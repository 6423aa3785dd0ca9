"""Lead-wise Grad-CAM and the classifier-randomization sanity check."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from tqdm import tqdm

from .errors import ShapeError
from .model import LightX3ECG
from .rng import make_stream


def grad_cam(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Grad-CAM of one activation map.

    Args:
        activation: A [C, L_feat] (or [B, C, L_feat]) final conv-stage activation
        gradient: d score / d A, same shape

    Returns:
        ReLU(sum_c w_c A_c) with w_c the position-average of the gradient, shape [L_feat] (or [B, L_feat])
    """
    if activation.shape != gradient.shape:
        raise ShapeError(f"activation {activation.shape} and gradient {gradient.shape} differ")
    weights = gradient.mean(axis=-1, keepdims=True)
    return np.maximum((weights * activation).sum(axis=-2), 0.0)


def _class_gradient(model: LightX3ECG, x: np.ndarray, class_id: Optional[int]
                    ) -> Tuple[int, np.ndarray, List[np.ndarray]]:
    """Eval forward + backward of one class score on a replica of ``model``.

    Returns (class_id, alpha [3], raw CAMs at feature resolution). ``model`` is
    only read, so explanations of different recordings may run concurrently.
    """
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] != 1:
        raise ShapeError(f"explanations take one recording at a time, got batch {x.shape[0]}")
    work = model.replica()
    logits, alpha = work.forward(x)
    if class_id is None:
        class_id = int(np.argmax(logits[0]))
    if not 0 <= class_id < model.spec.n_classes:
        raise ShapeError(f"class id {class_id} out of range [0, {model.spec.n_classes})")
    grad = np.zeros_like(logits)
    grad[0, class_id] = 1.0
    work.backward(grad)
    cams = [grad_cam(b.final_activation[0], b.final_activation_grad[0]) for b in work.backbones]
    return class_id, alpha[0], cams


def grad_cam_per_backbone(model: LightX3ECG, x: np.ndarray, class_id: int
                          ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw CAMs C_1..C_3 at feature resolution for ``x`` [3, L] or [1, 3, L]."""
    _, _, cams = _class_gradient(model, np.asarray(x), class_id)
    return tuple(cams)


def upsample(cam: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of a feature-resolution map onto ``length`` samples (endpoints aligned)."""
    if cam.size == 1:
        return np.full(length, float(cam[0]))
    return np.interp(np.linspace(0, cam.size - 1, length), np.arange(cam.size), cam)


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def combine_lead_maps(cams: Sequence[np.ndarray], alpha: np.ndarray, length: int) -> np.ndarray:
    """M_i = normalize(upsample(alpha_i * C_i)), stacked to [3, length]."""
    return np.stack([normalize_map(upsample(float(a) * np.asarray(c, dtype=np.float64), length))
                     for a, c in zip(alpha, cams)])


@dataclass
class Explanation:
    maps: np.ndarray  # [3, L] normalized M_i
    alpha: np.ndarray  # [3]
    class_id: int
    cams: List[np.ndarray] = field(default_factory=list, repr=False)  # raw C_i at feature resolution
    record_id: Optional[str] = None

    def scores_text(self, lead_names: Sequence[str]) -> str:
        return " ".join(f"{name}={a:.4f}" for name, a in zip(lead_names, self.alpha))


def lead_wise_explanation(model: LightX3ECG, x: np.ndarray, class_id: Optional[int] = None,
                          record_id: Optional[str] = None) -> Explanation:
    """Explain one recording; ``class_id`` defaults to the model's top-scoring class."""
    x = np.asarray(x)
    class_id, alpha, cams = _class_gradient(model, x, class_id)
    maps = combine_lead_maps(cams, alpha, x.shape[-1])
    return Explanation(maps=maps, alpha=np.asarray(alpha, dtype=np.float64), class_id=class_id, cams=cams,
                       record_id=record_id)


def evidence_mass_fraction(maps: np.ndarray, mask: np.ndarray) -> float:
    """Share of total map mass inside a boolean evidence mask ([L] masks broadcast over leads)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), maps.shape)
    total = float(maps.sum())
    return float(maps[mask].sum()) / total if total > 0 else 0.0


def rank_correlation(a: np.ndarray, b: np.ndarray) -> Tuple[float, bool]:
    """Spearman rho (average ranks on ties); (0.0, True) when either map is constant."""
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, True
    rho = spearmanr(a, b).correlation
    return float(rho), False


@dataclass
class RandomizationReport:
    table: pd.DataFrame  # columns: lead, recording_id, rho, undefined
    seed: int

    @property
    def mean_rho(self) -> float:
        return float(self.table["rho"].mean())

    def per_lead(self) -> pd.Series:
        return self.table.groupby("lead", sort=False)["rho"].mean()

    def write(self, path) -> Path:
        """Write a ``# seed=N`` line, then ``lead,recording_id,rho,undefined`` rows.

        ``undefined`` is 1 where a map was constant and rho was recorded as 0.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table = self.table[["lead", "recording_id", "rho", "undefined"]].astype({"undefined": int})
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# seed={self.seed}\n")
            table.to_csv(f, index=False, float_format="%.6f", lineterminator="\n")
        return path


def randomized_classifier(model: LightX3ECG, seed: int) -> LightX3ECG:
    """Copy of ``model`` whose classifier FC weights and bias are freshly re-drawn."""
    randomized = model.clone()
    randomized.classifier.reset_parameters(make_stream(seed, "randomize"))
    return randomized.eval()


def sanity_check(model: LightX3ECG, inputs: np.ndarray, ids: Optional[Sequence[str]] = None,
                 class_ids: Optional[Sequence[int]] = None, seed: int = 0,
                 lead_names: Sequence[str] = ("I", "II", "V1"), progress: bool = True,
                 ) -> Tuple[RandomizationReport, List[Tuple[Explanation, Explanation]]]:
    """Compare explanations of ``model`` and its classifier-randomized copy per recording and lead.

    Both explanations target the same class: ``class_ids`` when given, else the
    original model's prediction.
    """
    if inputs.ndim != 3:
        raise ShapeError(f"sanity_check expects [N, 3, L] inputs, got {inputs.shape}")
    if inputs.shape[0] < 100:
        logging.warning(f"Sanity check over {inputs.shape[0]} recordings; at least 100 are recommended")
    ids = list(ids) if ids is not None else [str(i) for i in range(inputs.shape[0])]
    randomized = randomized_classifier(model, seed)
    rows, pairs = [], []
    n_undefined = 0
    for n in tqdm(range(inputs.shape[0]), desc="sanity", disable=not progress, leave=False):
        target = None if class_ids is None else int(class_ids[n])
        original = lead_wise_explanation(model, inputs[n], target, ids[n])
        perturbed = lead_wise_explanation(randomized, inputs[n], original.class_id, ids[n])
        pairs.append((original, perturbed))
        for lead, a, b in zip(lead_names, original.maps, perturbed.maps):
            rho, undefined = rank_correlation(a, b)
            n_undefined += undefined
            rows.append({"lead": lead, "recording_id": ids[n], "rho": rho, "undefined": undefined})
    if n_undefined:
        logging.warning(f"{n_undefined} explanation pairs had a constant map; their correlation is recorded as 0")
    report = RandomizationReport(table=pd.DataFrame(rows, columns=["lead", "recording_id", "rho", "undefined"]),
                                 seed=seed)
    logging.info(f"Sanity check: mean Spearman rho = {report.mean_rho:.4f} (randomization seed {seed})")
    return report, pairs
