import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Generator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import RecordFormatError

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
LEAD_INDEX = {name: i for i, name in enumerate(STANDARD_LEADS)}
DEFAULT_LEADS = ("I", "II", "V1")
CHEST_LEAD_VARIANTS = tuple(("I", "II", f"V{k}") for k in range(1, 7))

SAMPLING_RATE = 500
INPUT_LENGTH = 5000
CANONICAL_UNIT = "microvolt"
_UNIT_SCALE = {"microvolt": 1.0, "millivolt": 1000.0}
_REQUIRED_KEYS = ("id", "leads", "sampling_rate", "unit", "length", "labels")


def lead_indices(leads: Sequence[str]) -> Tuple[int, ...]:
    """Row indices of ``leads`` in the standard 12-lead order."""
    try:
        return tuple(LEAD_INDEX[name] for name in leads)
    except KeyError as e:
        raise RecordFormatError(f"Unknown lead name {e.args[0]!r}; expected one of {STANDARD_LEADS}") from None


@dataclass
class ECGRecord:
    id: str
    signals: np.ndarray  # [n_leads, L], canonical unit
    lead_names: Tuple[str, ...]
    sampling_rate: float
    labels: Tuple[int, ...] = ()
    amplitude_unit: str = CANONICAL_UNIT
    age: Optional[float] = None
    sex: Optional[str] = None

    @property
    def length(self) -> int:
        return self.signals.shape[1]


@dataclass
class PreprocessedInput:
    x: np.ndarray  # [3, length]
    record_id: str
    leads: Tuple[str, ...]


def load_record(path) -> ECGRecord:
    """Parse one record file: ``key=value`` header lines, a blank line, then
    little-endian float32 samples in row-major [lead][sample] order."""
    path = Path(path)
    raw = path.read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise RecordFormatError(f"{path}: header is not terminated by a blank line")
    try:
        header_text = raw[:split].decode("utf-8")
    except UnicodeDecodeError as e:
        raise RecordFormatError(f"{path}: byte offset {e.start}: header is not valid UTF-8") from None
    header: Dict[str, str] = {}
    for line_no, line in enumerate(header_text.split("\n"), start=1):
        if "=" not in line:
            raise RecordFormatError(f"{path}: line {line_no}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        raise RecordFormatError(f"{path}: header is missing keys {missing}")

    unit = header["unit"]
    if unit not in _UNIT_SCALE:
        raise RecordFormatError(f"{path}: unknown amplitude unit {unit!r}; expected microvolt or millivolt")
    lead_names = tuple(name.strip() for name in header["leads"].split(",") if name.strip())
    try:
        length = int(header["length"])
        sampling_rate = float(header["sampling_rate"])
        labels = tuple(int(v) for v in header["labels"].split(",") if v.strip())
        age = float(header["age"]) if header.get("age") else None
    except ValueError as e:
        raise RecordFormatError(f"{path}: invalid numeric header field: {e}") from None
    if length < 1 or sampling_rate <= 0 or not lead_names:
        raise RecordFormatError(f"{path}: need length >= 1, sampling_rate > 0 and at least one lead")

    payload = raw[split + 2:]
    expected = len(lead_names) * length * 4
    if len(payload) != expected:
        available = len(payload) // 4
        row = min(available // length, len(lead_names) - 1)
        raise RecordFormatError(
            f"{path}: byte offset {split + 2}: declared {len(lead_names)} leads x {length} samples but payload "
            f"holds {available} samples; lead row {row} ({lead_names[row]}) is incomplete"
        )
    signals = np.frombuffer(payload, dtype="<f4").reshape(len(lead_names), length).astype(np.float32)
    signals = signals * np.float32(_UNIT_SCALE[unit])

    return ECGRecord(
        id=header["id"],
        signals=signals,
        lead_names=lead_names,
        sampling_rate=sampling_rate,
        labels=labels,
        amplitude_unit=CANONICAL_UNIT,
        age=age,
        sex=header.get("sex") or None,
    )


def write_record(record: ECGRecord, path, unit: Optional[str] = None) -> None:
    """Write ``record`` in the format read by ``load_record``."""
    unit = unit or record.amplitude_unit
    if unit not in _UNIT_SCALE:
        raise RecordFormatError(f"Unknown amplitude unit {unit!r}")
    lines = [
        f"id={record.id}",
        f"leads={','.join(record.lead_names)}",
        f"sampling_rate={record.sampling_rate:g}",
        f"unit={unit}",
        f"length={record.length}",
        f"labels={','.join(str(v) for v in record.labels)}",
    ]
    if record.age is not None:
        lines.append(f"age={record.age:g}")
    if record.sex:
        lines.append(f"sex={record.sex}")
    values = (record.signals / _UNIT_SCALE[unit]).astype("<f4")
    Path(path).write_bytes(("\n".join(lines) + "\n\n").encode("utf-8") + values.tobytes())


def preprocess(record: ECGRecord, leads: Sequence[str] = DEFAULT_LEADS, length: int = INPUT_LENGTH,
               standardize: bool = True, expected_rate: float = SAMPLING_RATE) -> PreprocessedInput:
    """Select three leads and fix them to ``length`` samples.

    Longer signals are truncated, shorter ones right-padded with exact zeros.
    Standardization (zero mean, unit variance per lead) uses the retained
    samples only, so the padded region stays zero.
    """
    if record.sampling_rate != expected_rate:
        raise RecordFormatError(
            f"Record {record.id} is sampled at {record.sampling_rate:g} Hz; only {expected_rate:g} Hz is "
            f"supported. Resample the source data before importing it."
        )
    missing = [name for name in leads if name not in record.lead_names]
    if missing:
        raise RecordFormatError(f"Record {record.id} has no lead(s) {missing}; available: {record.lead_names}")

    x = np.zeros((len(leads), length), dtype=np.float32)
    kept = min(record.length, length)
    for row, name in enumerate(leads):
        segment = record.signals[record.lead_names.index(name), :kept]
        if standardize:
            segment = segment.astype(np.float64)
            std = segment.std()
            segment = (segment - segment.mean()) / std if std > 1e-8 else segment - segment.mean()
        x[row, :kept] = segment
    return PreprocessedInput(x=x, record_id=record.id, leads=tuple(leads))


@dataclass
class DatasetManifest:
    root: Path
    entries: pd.DataFrame  # columns: file, labels (tuple of class ids)
    task: str
    classes: List[str]
    leads: Tuple[str, ...] = DEFAULT_LEADS

    def __post_init__(self):
        if self.task not in ("multi_class", "multi_label"):
            raise RecordFormatError(f"Unknown task {self.task!r} in manifest")
        used = {c for labels in self.entries["labels"] for c in labels}
        if any(c < 0 or c >= len(self.classes) for c in used):
            raise RecordFormatError(f"Manifest labels {sorted(used)} are outside 0..{len(self.classes) - 1}")
        for file_name, labels in zip(self.entries["file"], self.entries["labels"]):
            if self.task == "multi_class" and len(labels) != 1:
                raise RecordFormatError(f"{file_name}: multi_class entry needs exactly one label, got {list(labels)}")
            if not labels:
                raise RecordFormatError(f"{file_name}: entry has no labels")

    def __len__(self):
        return len(self.entries)

    def record_path(self, i: int) -> Path:
        return self.root / self.entries["file"].iloc[i]

    def validate(self) -> None:
        missing = [str(self.record_path(i)) for i in range(len(self)) if not self.record_path(i).exists()]
        if missing:
            _log_missing_file(missing[0])
            raise RecordFormatError(f"{len(missing)} manifest entries point to missing files, first: {missing[0]}")


def read_manifest(path) -> DatasetManifest:
    """Read ``# key=value`` metadata lines followed by a ``file,labels`` table.

    Multiple labels of one record are space-separated inside the labels field.
    """
    path = Path(path)
    if not path.exists():
        _log_missing_file(str(path))
        raise RecordFormatError(f"Manifest not found: {path}")
    meta: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as file:
        for line in file:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
    for key in ("task", "classes"):
        if key not in meta:
            raise RecordFormatError(f"{path}: manifest metadata is missing '# {key}=...'")
    table = pd.read_csv(path, comment="#", dtype={"file": str, "labels": str}, keep_default_na=False)
    if list(table.columns) != ["file", "labels"]:
        raise RecordFormatError(f"{path}: expected columns file,labels, got {list(table.columns)}")
    try:
        table["labels"] = [tuple(int(v) for v in str(cell).split()) for cell in table["labels"]]
    except ValueError as e:
        raise RecordFormatError(f"{path}: invalid label field: {e}") from None
    leads = tuple(meta.get("leads", ",".join(DEFAULT_LEADS)).split(","))
    try:
        return DatasetManifest(root=path.parent, entries=table, task=meta["task"],
                               classes=meta["classes"].split(","), leads=leads)
    except RecordFormatError as e:
        raise RecordFormatError(f"{path}: {e}") from None


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    table = manifest.entries.copy()
    table["labels"] = [" ".join(str(c) for c in labels) for labels in table["labels"]]
    with open(path, "w", encoding="utf-8") as file:
        file.write(f"# task={manifest.task}\n")
        file.write(f"# classes={','.join(manifest.classes)}\n")
        file.write(f"# leads={','.join(manifest.leads)}\n")
        table.to_csv(file, index=False, lineterminator="\n")


@dataclass
class ECGDataset:
    x: np.ndarray  # [N, 3, length] float32
    y: np.ndarray  # [N, C] bool
    ids: List[str]
    classes: List[str]
    task: str
    leads: Tuple[str, ...]
    masks: Optional[List[Optional[np.ndarray]]] = field(default=None, repr=False)
    standardize: bool = True

    def __len__(self):
        return self.x.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """Class indices for multi_class, the 0/1 matrix for multi_label."""
        if self.task == "multi_class":
            return np.argmax(self.y, axis=1)
        return self.y.astype(np.float32)

    def stratify_labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1) if self.task == "multi_class" else self.y

    def subset(self, indices: np.ndarray) -> "ECGDataset":
        indices = np.asarray(indices)
        masks = [self.masks[i] for i in indices] if self.masks is not None else None
        return ECGDataset(x=self.x[indices], y=self.y[indices], ids=[self.ids[i] for i in indices],
                          classes=self.classes, task=self.task, leads=self.leads, masks=masks,
                          standardize=self.standardize)


class ECGDataLoader:
    """Loads a manifest and its records into model-ready arrays."""

    def __init__(self, manifest_path, leads: Optional[Sequence[str]] = None, standardize: bool = True,
                 length: int = INPUT_LENGTH):
        self.manifest_path = Path(manifest_path)
        self.manifest = read_manifest(self.manifest_path)
        self.leads = tuple(leads) if leads else self.manifest.leads
        self.standardize = standardize
        self.length = length

    def _encode_labels(self, labels: Tuple[int, ...]) -> np.ndarray:
        row = np.zeros(len(self.manifest.classes), dtype=bool)
        row[list(labels)] = True
        return row

    def load_dataset(self, start_index: int = 0, limit: Optional[int] = None,
                     with_masks: bool = False) -> ECGDataset:
        """Load and preprocess manifest entries with pagination support.

        Args:
            start_index: First manifest entry to load
            limit: Maximum number of records (None for all)
            with_masks: Also load ``<record>.mask.npy`` evidence masks when present

        Returns:
            ECGDataset with stacked [N, 3, length] inputs
        """
        self.manifest.validate()
        stop = len(self.manifest) if limit is None else min(len(self.manifest), start_index + limit)
        logging.info(f"Loading records {start_index}..{stop} from {self.manifest_path} (leads={self.leads})")
        xs, ys, ids, masks = [], [], [], []
        for i in range(start_index, stop):
            path = self.manifest.record_path(i)
            try:
                record = load_record(path)
                xs.append(preprocess(record, self.leads, self.length, self.standardize).x)
            except RecordFormatError as e:
                logging.error(f"Error loading record {path}: {e}")
                raise
            ys.append(self._encode_labels(self.manifest.entries["labels"].iloc[i]))
            ids.append(record.id)
            if with_masks:
                masks.append(load_evidence_mask(path, self.leads, self.length))
        logging.info(f"Successfully loaded {len(xs)} records")
        empty = np.zeros((0, len(self.leads), self.length), dtype=np.float32)
        return ECGDataset(
            x=np.stack(xs) if xs else empty,
            y=np.stack(ys) if ys else np.zeros((0, len(self.manifest.classes)), dtype=bool),
            ids=ids,
            classes=list(self.manifest.classes),
            task=self.manifest.task,
            leads=self.leads,
            masks=masks if with_masks else None,
            standardize=self.standardize,
        )

    def stream_batches(self, batch_size: int = 100) -> Generator[ECGDataset, None, None]:
        """Yield the dataset in batches so large manifests need not fit in memory."""
        for start in range(0, len(self.manifest), batch_size):
            yield self.load_dataset(start, batch_size)


def evidence_mask_path(record_path) -> Path:
    record_path = Path(record_path)
    return record_path.with_name(record_path.stem + ".mask.npy")


def load_evidence_mask(record_path, leads: Sequence[str], length: int = INPUT_LENGTH) -> Optional[np.ndarray]:
    """Evidence mask [3, length] aligned with ``preprocess`` output, or None when absent."""
    mask_path = evidence_mask_path(record_path)
    if not mask_path.exists():
        return None
    stored = np.load(mask_path)
    header_leads = _record_leads(record_path)
    out = np.zeros((len(leads), length), dtype=bool)
    for row, name in enumerate(leads):
        if name in header_leads:
            source = stored[header_leads.index(name)]
            kept = min(len(source), length)
            out[row, :kept] = source[:kept]
    return out


def _record_leads(record_path) -> Tuple[str, ...]:
    with open(record_path, "rb") as file:
        for raw_line in file:
            line = raw_line.decode("utf-8", errors="replace").strip()
            if not line:
                break
            if line.startswith("leads="):
                return tuple(line[len("leads="):].split(","))
    return ()


def describe_dataset(manifest_path) -> pd.DataFrame:
    """Per-class frequency, male share and age statistics of a manifest."""
    manifest = read_manifest(manifest_path)
    rows = []
    records = [load_record(manifest.record_path(i)) for i in range(len(manifest))]
    total = len(records)
    for class_id, name in enumerate(manifest.classes):
        members = [r for r in records if class_id in r.labels]
        sexes = [r.sex for r in members if r.sex]
        ages = np.array([r.age for r in members if r.age is not None], dtype=np.float64)
        rows.append({
            "class": name,
            "count": len(members),
            "frequency_pct": 100.0 * len(members) / total if total else 0.0,
            "male_pct": 100.0 * sum(s.upper().startswith("M") for s in sexes) / len(sexes) if sexes else np.nan,
            "age_mean": float(ages.mean()) if ages.size else np.nan,
            "age_std": float(ages.std(ddof=1)) if ages.size > 1 else np.nan,
        })
    return pd.DataFrame(rows).set_index("class")


def _log_missing_file(file_path: str) -> None:
    """Log information about missing files."""
    logging.error(f"File does not exist: {file_path}")
    try:
        dir_path = os.path.dirname(file_path)
        if os.path.exists(dir_path):
            files = sorted(os.listdir(dir_path))[:20]
            logging.info(f"Available files in {dir_path}: {files}")
    except OSError as e:
        logging.error(f"Error listing directory: {e}")
