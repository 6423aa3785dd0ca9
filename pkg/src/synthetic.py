"""Desk-scale pseudo-ECG generator.

Each record is a periodic beat (P bump, QRS complex, T bump) rendered on all 12
standard leads with a fixed per-lead gain, plus white noise. Classes are
morphological edits confined to declared windows relative to each beat onset;
those windows, repeated over every beat, form the record's evidence mask.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data_loader import (SAMPLING_RATE, STANDARD_LEADS, DatasetManifest, ECGRecord, evidence_mask_path,
                          write_manifest, write_record)
from .errors import ConfigError
from .rng import make_stream

# (center s after beat onset, width s, amplitude mV)
_COMPONENTS = {
    "P": (0.100, 0.020, 0.15),
    "Q": (0.185, 0.008, -0.10),
    "R": (0.200, 0.010, 1.00),
    "S": (0.215, 0.008, -0.25),
    "T": (0.420, 0.040, 0.30),
}
_LEAD_GAIN = dict(zip(STANDARD_LEADS, (0.7, 1.0, 0.4, -0.8, 0.3, 0.7, -0.6, -0.3, 0.4, 0.9, 1.0, 0.8)))
_NOISE_MV = 0.015
_BUMP_HALF_WIDTH = 4.0  # bumps are cut at +-4 widths so edits stay inside their windows


@dataclass(frozen=True)
class ClassEdit:
    name: str
    group: Optional[str]  # edits of the same group cannot be combined
    window: Tuple[float, float]  # evidence window, s after beat onset


CLASS_EDITS: Dict[str, ClassEdit] = {
    "normal": ClassEdit("normal", None, (0.0, 0.0)),
    "no_p": ClassEdit("no_p", "P", (0.02, 0.18)),
    "st_up": ClassEdit("st_up", "ST", (0.24, 0.38)),
    "wide_qrs": ClassEdit("wide_qrs", "QRS", (0.10, 0.30)),
    "st_down": ClassEdit("st_down", "ST", (0.24, 0.38)),
    "tall_t": ClassEdit("tall_t", "T", (0.26, 0.58)),
}
CLASS_ORDER = tuple(CLASS_EDITS)
SECOND_EDIT_PROBABILITY = 0.3


def _bump(t: np.ndarray, center: float, width: float, amp: float) -> np.ndarray:
    out = amp * np.exp(-0.5 * ((t - center) / width) ** 2)
    out[np.abs(t - center) > _BUMP_HALF_WIDTH * width] = 0.0
    return out


def _st_plateau(t: np.ndarray, level: float) -> np.ndarray:
    start, stop, ramp = 0.26, 0.36, 0.02
    rise = 0.5 * (1 - np.cos(np.pi * np.clip((t - (start - ramp)) / ramp, 0, 1)))
    fall = 0.5 * (1 - np.cos(np.pi * np.clip(((stop + ramp) - t) / ramp, 0, 1)))
    return level * np.minimum(rise, fall)


def _beat(t: np.ndarray, edits: Sequence[str]) -> np.ndarray:
    """One beat in mV, ``t`` in seconds after onset."""
    components = dict(_COMPONENTS)
    if "no_p" in edits:
        components["P"] = (0.100, 0.020, 0.0)
    if "wide_qrs" in edits:
        for key in ("Q", "R", "S"):
            center, width, amp = components[key]
            components[key] = (center, width * 2.5, amp * 0.7)
    if "tall_t" in edits:
        components["T"] = (0.420, 0.040, 0.90)
    beat = sum(_bump(t, *spec) for spec in components.values())
    if "st_up" in edits:
        beat = beat + _st_plateau(t, 0.20)
    if "st_down" in edits:
        beat = beat + _st_plateau(t, -0.20)
    return beat


def render_pseudo_ecg(edits: Sequence[str], n_samples: int, sampling_rate: float = SAMPLING_RATE,
                      period_s: float = 0.85, phase_s: float = 0.0,
                      leads: Sequence[str] = STANDARD_LEADS) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free signals [len(leads), n_samples] in mV and the evidence mask [n_samples].

    ``phase_s`` shifts the first beat onset; a partial beat before it is rendered too.
    """
    unknown = [e for e in edits if e not in CLASS_EDITS]
    if unknown:
        raise ConfigError(f"Unknown synthetic class(es) {unknown}; expected names from {CLASS_ORDER}")
    if period_s < 0.6:
        raise ConfigError(f"period_s={period_s} is shorter than one beat template")
    t = np.arange(n_samples) / sampling_rate
    trace = np.zeros(n_samples)
    mask = np.zeros(n_samples, dtype=bool)
    onset = phase_s - period_s
    while onset < t[-1] + 1e-12:
        trace += _beat(t - onset, edits)
        for name in edits:
            lo, hi = CLASS_EDITS[name].window
            if hi > lo:
                mask |= (t >= onset + lo) & (t <= onset + hi)
        onset += period_s
    gains = np.array([_LEAD_GAIN[name] for name in leads])
    return gains[:, None] * trace[None, :], mask


def _resolve_classes(classes: Union[int, Sequence[str]]) -> List[str]:
    if isinstance(classes, int):
        if not 2 <= classes <= len(CLASS_ORDER):
            raise ConfigError(f"classes must be between 2 and {len(CLASS_ORDER)}, got {classes}")
        return list(CLASS_ORDER[:classes])
    names = list(classes)
    if len(names) < 2 or len(set(names)) != len(names):
        raise ConfigError(f"need at least 2 distinct classes, got {names}")
    unknown = [n for n in names if n not in CLASS_EDITS]
    if unknown:
        raise ConfigError(f"Unknown synthetic class(es) {unknown}; expected names from {CLASS_ORDER}")
    return names


def _second_edit(primary: str, names: List[str], rng: np.random.Generator) -> Optional[str]:
    if CLASS_EDITS[primary].group is None or rng.random() >= SECOND_EDIT_PROBABILITY:
        return None
    group = CLASS_EDITS[primary].group
    options = [n for n in names if CLASS_EDITS[n].group not in (None, group)]
    return options[int(rng.integers(len(options)))] if options else None


def synth_dataset(out_dir, n_per_class: int = 200, classes: Union[int, Sequence[str]] = 4, seed: int = 0,
                  task: str = "multi_class", duration_s: float = 10.0,
                  sampling_rate: float = SAMPLING_RATE) -> DatasetManifest:
    """Write a balanced pseudo-ECG dataset and its manifest under ``out_dir``.

    Args:
        out_dir: Output directory, created when missing
        n_per_class: Records per class (primary label for multi_label)
        classes: Number of classes (taken in ``CLASS_ORDER``) or explicit class names
        seed: Generation seed; same seed gives byte-identical files
        task: multi_class or multi_label (records may carry a second compatible edit)
        duration_s: Record duration in seconds

    Returns:
        The written DatasetManifest
    """
    if task not in ("multi_class", "multi_label"):
        raise ConfigError(f"Unknown task '{task}', expected multi_class or multi_label")
    if n_per_class < 1 or duration_s <= 0:
        raise ConfigError("n_per_class and duration_s must be positive")
    names = _resolve_classes(classes)
    out_dir = Path(out_dir)
    records_dir = out_dir / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    n_samples = int(round(duration_s * sampling_rate))

    rows = []
    index = 0
    for class_id, primary in enumerate(names):
        for _ in range(n_per_class):
            rng = make_stream(seed, "synth", index)
            edits = [primary]
            if task == "multi_label":
                second = _second_edit(primary, names, rng)
                if second is not None:
                    edits.append(second)
            period = rng.uniform(0.75, 0.95)
            phase = rng.uniform(0.0, period)
            scale = rng.uniform(0.9, 1.1)
            clean, beat_mask = render_pseudo_ecg([e for e in edits if e != "normal"], n_samples,
                                                 sampling_rate, period, phase)
            noisy = scale * clean + rng.normal(0.0, _NOISE_MV, size=clean.shape)
            labels = tuple(sorted(names.index(e) for e in edits))
            record = ECGRecord(
                id=f"syn-{index:05d}",
                signals=(noisy * 1000.0).astype(np.float32),
                lead_names=STANDARD_LEADS,
                sampling_rate=sampling_rate,
                labels=labels,
                age=float(rng.integers(20, 90)),
                sex="M" if rng.random() < 0.5 else "F",
            )
            file_name = f"records/{record.id}.ecg"
            write_record(record, out_dir / file_name)
            np.save(evidence_mask_path(out_dir / file_name), np.repeat(beat_mask[None, :], len(STANDARD_LEADS), 0))
            rows.append({"file": file_name, "labels": labels})
            index += 1

    manifest = DatasetManifest(root=out_dir, entries=pd.DataFrame(rows, columns=["file", "labels"]),
                               task=task, classes=names)
    write_manifest(manifest, out_dir / "manifest.csv")
    logging.info(f"Wrote {len(rows)} synthetic records ({len(names)} classes, task={task}) to {out_dir}")
    return manifest
