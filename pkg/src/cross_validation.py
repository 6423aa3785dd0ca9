import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold, StratifiedKFold

from .checkpoint import save_checkpoint
from .data_loader import CHEST_LEAD_VARIANTS, ECGDataLoader, ECGDataset
from .errors import LightX3ECGError, ShapeError, TrainingError
from .metrics import MetricsReport, average_reports, threshold_search
from .model import LightX3ECG
from .training import TrainConfig, Trainer, predict_scores, probabilities, evaluate_model

ModelFactory = Callable[[int], LightX3ECG]


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # [N] fold id per record
    strat_labels: np.ndarray  # [N] class used for stratification (-1: unlabeled)
    ids: Optional[List[str]] = None

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def round_split(self, round_index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(train, validation, test) indices: test is fold r, validation fold r+1 (mod k), train the rest."""
        if not 0 <= round_index < self.k:
            raise ShapeError(f"round {round_index} outside [0, {self.k})")
        test_fold = round_index
        val_fold = (round_index + 1) % self.k
        train = np.flatnonzero((self.assignments != test_fold) & (self.assignments != val_fold))
        return train, self.fold_indices(val_fold), self.fold_indices(test_fold)

    def to_frame(self) -> pd.DataFrame:
        ids = self.ids if self.ids is not None else list(range(len(self.assignments)))
        return pd.DataFrame({"record": ids, "fold": self.assignments, "stratum": self.strat_labels})


def stratification_labels(labels: np.ndarray) -> np.ndarray:
    """One stratum per record.

    Integer labels are used as given. For a boolean [N, C] label matrix each
    record takes its most frequent constituent class (global frequency, ties to
    the lowest id); records without labels get -1.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return labels.astype(np.int64)
    labels = labels.astype(bool)
    freq = labels.sum(axis=0)
    # rank classes by frequency desc, id asc; pick the best-ranked class present
    order = np.lexsort((np.arange(labels.shape[1]), -freq))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    ranked = np.where(labels, rank[None, :], labels.shape[1])
    best = np.argmin(ranked, axis=1)
    return np.where(labels.any(axis=1), best, -1).astype(np.int64)


def stratified_kfold(labels: np.ndarray, k: int = 10, seed: int = 0, ids: Optional[List[str]] = None) -> FoldPlan:
    """Assign every record to one of ``k`` label-stratified folds."""
    strata = stratification_labels(labels)
    n = strata.shape[0]
    if k < 2 or k > n:
        raise ShapeError(f"cannot split {n} records into k={k} folds")
    counts = np.bincount(strata - strata.min())
    if counts[counts > 0].min() < k:
        logging.warning(f"Some class has fewer than k={k} members; stratification is best-effort")
    assignments = np.empty(n, dtype=np.int64)
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % (2 ** 32))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            splits = list(splitter.split(np.zeros(n), strata))
    except ValueError as e:
        logging.warning(f"Stratified split failed ({e}); falling back to unstratified k-fold")
        splits = list(KFold(n_splits=k, shuffle=True, random_state=seed % (2 ** 32)).split(np.zeros(n)))
    for fold, (_, test_idx) in enumerate(splits):
        assignments[test_idx] = fold
    return FoldPlan(k=k, assignments=assignments, strat_labels=strata, ids=ids)


@dataclass
class CVResult:
    plan: FoldPlan
    per_fold: Dict[int, MetricsReport] = field(default_factory=dict)
    thresholds: Dict[int, np.ndarray] = field(default_factory=dict)
    histories: Dict[int, List[float]] = field(default_factory=dict)

    @property
    def mean(self) -> MetricsReport:
        return average_reports(list(self.per_fold.values()))

    def reports(self) -> Dict[object, MetricsReport]:
        out: Dict[object, MetricsReport] = dict(self.per_fold)
        out["mean"] = self.mean
        return out


def write_thresholds(thresholds: np.ndarray, classes: Sequence[str], path) -> Path:
    path = Path(path)
    pd.DataFrame({"class": list(classes), "threshold": thresholds}).to_csv(path, index=False, lineterminator="\n")
    return path


def run_cv(dataset: ECGDataset, model_factory: ModelFactory, cfg: TrainConfig, k: int = 10,
           folds: Optional[int] = None, checkpoint_dir=None, index_encoding: str = "varint",
           progress: bool = True) -> CVResult:
    """Cross-validated training and evaluation.

    Each round trains on k-2 folds, tunes per-class thresholds on the validation
    fold (multi_label only) and scores the test fold with the final-epoch weights.
    ``folds`` limits the run to the first rounds; 1 gives a single split.
    """
    if k < 3:
        raise ShapeError(f"run_cv needs k >= 3 for separate train/validation/test folds, got {k}")
    if dataset.task != cfg.task:
        raise ShapeError(f"dataset task '{dataset.task}' does not match config task '{cfg.task}'")
    rounds = k if folds is None else folds
    if not 1 <= rounds <= k:
        raise ShapeError(f"folds must be in [1, {k}], got {rounds}")
    plan = stratified_kfold(dataset.stratify_labels(), k, cfg.seed, ids=dataset.ids)
    result = CVResult(plan=plan)
    trainer = Trainer(cfg, progress=progress)

    for r in range(rounds):
        train_idx, val_idx, test_idx = plan.round_split(r)
        logging.info(f"Round {r + 1}/{rounds}: train={len(train_idx)} val={len(val_idx)} test={len(test_idx)}")
        try:
            model = model_factory(r)
            result.histories[r] = trainer.fit(model, dataset.subset(train_idx), stream_key=("round", r))
            thresholds = None
            if cfg.task == "multi_label":
                val_logits, _ = predict_scores(model, dataset.x[val_idx])
                thresholds = threshold_search(probabilities(val_logits, cfg.task), dataset.y[val_idx])
                result.thresholds[r] = thresholds
            result.per_fold[r] = evaluate_model(model, dataset.subset(test_idx), thresholds)
        except (LightX3ECGError, FloatingPointError) as e:
            logging.error(f"Cross-validation round {r} failed: {e}")
            raise TrainingError(f"cross-validation round {r} failed: {e}") from e
        logging.info(f"Round {r + 1}: macro F1 = {result.per_fold[r].macro_f1:.4f}")

        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            extras = {"classes": dataset.classes, "task": dataset.task, "leads": list(dataset.leads),
                      "standardize": dataset.standardize, "round": r}
            if thresholds is not None:
                extras["thresholds"] = [float(t) for t in thresholds]
                write_thresholds(thresholds, dataset.classes, checkpoint_dir / f"fold{r}.thresholds.csv")
            save_checkpoint(model, checkpoint_dir / f"fold{r}.ckpt", extras=extras, index_encoding=index_encoding)
    return result


def chest_lead_ablation(manifest_path, model_factory: ModelFactory, cfg: TrainConfig, k: int = 10,
                        folds: Optional[int] = None, standardize: bool = True, length: int = 5000,
                        variants: Sequence[Tuple[str, str, str]] = CHEST_LEAD_VARIANTS,
                        progress: bool = True) -> pd.DataFrame:
    """Run the CV protocol once per lead triple (I, II, Vk) and tabulate mean macro F1."""
    rows = []
    for leads in variants:
        loader = ECGDataLoader(manifest_path, leads=leads, standardize=standardize, length=length)
        dataset = loader.load_dataset()
        result = run_cv(dataset, model_factory, cfg, k=k, folds=folds, progress=progress)
        rows.append({"leads": ",".join(leads), "macro_f1": result.mean.macro_f1})
        logging.info(f"Leads {leads}: mean macro F1 = {result.mean.macro_f1:.4f}")
    return pd.DataFrame(rows)
