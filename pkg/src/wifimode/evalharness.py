"""Cross-validation, confusion metrics, and the two sweep drivers.

Rates/percentages are kept at full precision internally; formatting to
one decimal (and "n/a" for undefined recalls/precisions) happens only at
the reporting edge.  Every (cell, fold) pair derives its own seed from
the master seed, so neither execution order nor parallelism changes any
result.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import NormalizationStats
from .model import (SWEEP_ARCH_NAMES, ArchitectureSpec, Model, ModelConfig,
                    all_config_names)
from .trainer import (PseudoLabelConfig, TrainConfig, train_semisupervised,
                      train_supervised)

N_CLASSES = 3


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle indices and cut into k folds with sizes differing by <= 1."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k} n={n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return [np.sort(f) for f in np.array_split(rng.permutation(n), k)]


def stratified_kfold(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """K folds preserving class proportions (per-class counts differ <= 1).

    Indices of each class are shuffled, concatenated, and dealt round-robin
    into folds, which bounds both per-class and total imbalance.
    """
    y = np.asarray(y)
    n = y.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k} n={n}")
    if n and y.min() < 0:
        raise ValueError("stratified folds need labelled rows only")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dealt: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in sorted(np.unique(y)):
        idx = np.flatnonzero(y == cls)
        for i in rng.permutation(idx):
            dealt[pos % k].append(int(i))
            pos += 1
    return [np.array(sorted(f), dtype=np.int64) for f in dealt]


def train_val_split(y: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified single split; returns (train_idx, val_idx)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    k = max(2, int(round(1.0 / val_fraction)))
    folds = stratified_kfold(y, k, seed)
    val = folds[0]
    train = np.sort(np.concatenate(folds[1:]))
    return train, val


def confusion(actual: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Counts with actual modes as rows and predicted modes as columns."""
    actual = np.asarray(actual)
    predicted = np.asarray(predicted)
    if actual.shape != predicted.shape:
        raise ValueError("actual/predicted length mismatch")
    if actual.size and not (
            (actual >= 0).all() and (actual < N_CLASSES).all()
            and (predicted >= 0).all() and (predicted < N_CLASSES).all()):
        raise ValueError("class ids must be in 0..2")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (actual, predicted), 1)
    return cm


@dataclass
class MetricsReport:
    confusion_matrix: np.ndarray
    accuracy_pct: float
    recall_pct: list[float | None]
    precision_pct: list[float | None]

    @staticmethod
    def _fmt(v: float | None) -> str:
        return "n/a" if v is None else f"{v:.1f}"

    def recall_str(self) -> list[str]:
        return [self._fmt(v) for v in self.recall_pct]

    def precision_str(self) -> list[str]:
        return [self._fmt(v) for v in self.precision_pct]


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    """Per-class recall/precision and overall accuracy, in percent.

    A class absent from the actuals has no recall; a class never predicted
    has no precision.  Those stay None rather than a fake 0/100.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (N_CLASSES, N_CLASSES) or (cm < 0).any():
        raise ValueError("confusion matrix must be 3x3 with non-negative counts")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    recall = [100.0 * diag[i] / rows[i] if rows[i] else None for i in range(N_CLASSES)]
    precision = [100.0 * diag[i] / cols[i] if cols[i] else None for i in range(N_CLASSES)]
    return MetricsReport(cm, 100.0 * diag.sum() / total, recall, precision)


def evaluate_model(model: Model, X: np.ndarray, y: np.ndarray) -> MetricsReport:
    return metrics_from_confusion(confusion(y, model.predict(X)))


@dataclass
class FoldResult:
    fold: int
    train_acc_pct: float
    val_acc_pct: float
    final_train_loss: float
    runtime_s: float
    report: MetricsReport | None = None
    error: str | None = None

    @property
    def gap_pct(self) -> float:
        return self.train_acc_pct - self.val_acc_pct


@dataclass
class CVResult:
    config: ModelConfig
    arch: ArchitectureSpec
    sample_rate: float
    folds: list[FoldResult] = field(default_factory=list)

    def _ok(self) -> list[FoldResult]:
        return [f for f in self.folds if f.error is None]

    @property
    def n_failed(self) -> int:
        return len(self.folds) - len(self._ok())

    @property
    def mean_val_acc_pct(self) -> float:
        ok = self._ok()
        if not ok:
            raise ValueError("all folds failed")
        return float(np.mean([f.val_acc_pct for f in ok]))

    @property
    def std_val_acc_pct(self) -> float:
        return float(np.std([f.val_acc_pct for f in self._ok()]))

    @property
    def mean_train_acc_pct(self) -> float:
        return float(np.mean([f.train_acc_pct for f in self._ok()]))

    @property
    def mean_final_train_loss(self) -> float:
        return float(np.mean([f.final_train_loss for f in self._ok()]))


def _fold_seeds(master_seed: int, cell: int, fold: int) -> tuple[int, int, int]:
    """(model_seed, train_seed, split-independent spare) for one cell/fold."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(cell, fold))
    state = ss.generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def run_fold(X: np.ndarray, y: np.ndarray, train_idx: np.ndarray, val_idx: np.ndarray,
             config: ModelConfig, arch: ArchitectureSpec, tc: TrainConfig,
             fold: int, X_pool: np.ndarray | None = None,
             plc: PseudoLabelConfig | None = None) -> FoldResult:
    """Train once and score one held-out fold; failures become data."""
    t0 = time.perf_counter()
    try:
        X_tr, y_tr = X[train_idx], y[train_idx]
        X_va, y_va = X[val_idx], y[val_idx]
        norm = NormalizationStats.fit(X_tr)
        model = Model.build(config, arch, tc.seed, norm)
        if X_pool is not None and plc is not None and plc.sample_rate > 0:
            tr = train_semisupervised(model, X_tr, y_tr, X_pool, tc, plc)
        else:
            tr = train_supervised(model, X_tr, y_tr, tc)
        train_acc = 100.0 * float(np.mean(model.predict(X_tr) == y_tr))
        report = evaluate_model(model, X_va, y_va)
    except Exception as exc:  # noqa: BLE001 - a fold failure must not kill the sweep
        return FoldResult(fold, float("nan"), float("nan"), float("nan"),
                          time.perf_counter() - t0, None, f"{type(exc).__name__}: {exc}")
    return FoldResult(fold, train_acc, report.accuracy_pct, tr.final_train_loss,
                      time.perf_counter() - t0, report)


def cross_validate(X: np.ndarray, y: np.ndarray, config: ModelConfig,
                   arch: ArchitectureSpec, epochs: int, batch_size: int,
                   master_seed: int, k: int = 10, cell: int = 0,
                   X_pool: np.ndarray | None = None,
                   plc: PseudoLabelConfig | None = None,
                   stratified: bool = True, lr: float = 1e-3) -> CVResult:
    """K-fold CV of one (config, arch, sample-rate) cell.

    Normalization stats are fitted on each fold's training rows only; the
    unlabelled pool (when present) is shared across folds.
    """
    split_seed = int(np.random.SeedSequence(master_seed, spawn_key=(cell,)).generate_state(1)[0])
    folds = stratified_kfold(y, k, split_seed) if stratified else kfold_split(len(y), k, split_seed)
    rate = plc.sample_rate if plc is not None else 0.0
    result = CVResult(config, arch, rate)
    for fold, val_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for i, f in enumerate(folds) if i != fold]))
        model_seed, train_seed, _ = _fold_seeds(master_seed, cell, fold)
        tc = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=train_seed)
        result.folds.append(run_fold(X, y, train_idx, val_idx, config, arch, tc,
                                     fold, X_pool, plc))
    return result


@dataclass
class SweepRow:
    cell: str
    arch: str
    config: str
    sample_rate: float
    fold: int
    train_acc_pct: float
    val_acc_pct: float
    gap_pct: float
    runtime_s: float
    error: str | None = None


def write_report_csv(rows: list[SweepRow], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell,arch,config,sample_rate,fold,train_acc,val_acc,gap_pct,runtime_s\n")
        for r in rows:
            fh.write(f"{r.cell},{r.arch},{r.config},{r.sample_rate!r},{r.fold},"
                     f"{_num(r.train_acc_pct)},{_num(r.val_acc_pct)},"
                     f"{_num(r.gap_pct)},{r.runtime_s:.3f}\n")


def _num(v: float) -> str:
    return "n/a" if np.isnan(v) else f"{v:.4f}"


@dataclass
class ConfigSweepResult:
    rows: list[SweepRow]
    ranking: list[tuple[str, float]]  # (config name, val accuracy) best first

    @property
    def best_config(self) -> str:
        return self.ranking[0][0]


def run_config_sweep(X: np.ndarray, y: np.ndarray, epochs: int = 500,
                     batch_size: int = 32, master_seed: int = 0,
                     arch: ArchitectureSpec | None = None,
                     val_fraction: float = 0.2) -> ConfigSweepResult:
    """Train all 16 width/batchnorm/dropout configs on one stratified split.

    Every cell sees the same split so the ranking reflects the config, not
    split luck.
    """
    if arch is None:
        arch = ArchitectureSpec.from_name("ResNet34")
    split_seed = int(np.random.SeedSequence(master_seed, spawn_key=(10_000,)).generate_state(1)[0])
    train_idx, val_idx = train_val_split(y, val_fraction, split_seed)

    rows: list[SweepRow] = []
    scored: list[tuple[str, float]] = []
    for cell, name in enumerate(all_config_names()):
        config = ModelConfig.from_name(name)
        _, train_seed, _ = _fold_seeds(master_seed, cell, 0)
        tc = TrainConfig(epochs=epochs, batch_size=batch_size, seed=train_seed)
        fr = run_fold(X, y, train_idx, val_idx, config, arch, tc, 0)
        rows.append(SweepRow(name, arch.name, name, 0.0, 0, fr.train_acc_pct,
                             fr.val_acc_pct, fr.gap_pct, fr.runtime_s, fr.error))
        if fr.error is None:
            scored.append((name, fr.val_acc_pct))
    if not scored:
        raise RuntimeError("every config cell failed")
    scored.sort(key=lambda t: (-t[1], t[0]))
    return ConfigSweepResult(rows, scored)


DEFAULT_SAMPLE_RATES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ArchSweepResult:
    rows: list[SweepRow]
    summary: list[dict]  # one dict per cell with mean/std val accuracy

    @property
    def best_cell(self) -> dict:
        ok = [s for s in self.summary if s["mean_val_acc"] is not None]
        if not ok:
            raise RuntimeError("every sweep cell failed")
        return max(ok, key=lambda s: s["mean_val_acc"])


def _arch_cell(args) -> tuple[int, "CVResult"]:
    (slot, seed_cell, X, y, X_pool, config, arch, rate,
     epochs, batch_size, master_seed, k) = args
    plc = PseudoLabelConfig(sample_rate=rate) if rate > 0 else None
    pool = X_pool if rate > 0 else None
    cv = cross_validate(X, y, config, arch, epochs, batch_size, master_seed,
                        k=k, cell=seed_cell, X_pool=pool, plc=plc)
    return slot, cv


def run_architecture_sweep(X: np.ndarray, y: np.ndarray, X_pool: np.ndarray,
                           epochs: int = 1000, batch_size: int = 32,
                           master_seed: int = 0, k: int = 10,
                           config: ModelConfig | None = None,
                           arch_names: tuple[str, ...] = SWEEP_ARCH_NAMES,
                           sample_rates: tuple[float, ...] = DEFAULT_SAMPLE_RATES,
                           include_plain_baseline: bool = True,
                           jobs: int = 1) -> ArchSweepResult:
    """Depth x pseudo-label-rate grid under k-fold CV, plus a no-shortcut
    baseline at rate 0; cell seeds are order-independent."""
    if config is None:
        config = ModelConfig.from_name("c10")

    # all rate cells of one architecture share a seed cell, so every rate
    # sees the same folds and per-fold streams: rate comparisons are
    # paired, differing only in the pseudo term
    specs: list[tuple[ArchitectureSpec, float, int]] = []
    for ai, name in enumerate(arch_names):
        for rate in sample_rates:
            specs.append((ArchitectureSpec.from_name(name), float(rate), ai))
    if include_plain_baseline:
        specs.append((ArchitectureSpec.from_name("Plain34"), 0.0, len(arch_names)))

    tasks = [(slot, seed_cell, X, y, X_pool, config, arch, rate,
              epochs, batch_size, master_seed, k)
             for slot, (arch, rate, seed_cell) in enumerate(specs)]

    results: dict[int, CVResult] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, cv in pool.map(_arch_cell, tasks):
                results[cell] = cv
    else:
        for task in tasks:
            cell, cv = _arch_cell(task)
            results[cell] = cv

    rows: list[SweepRow] = []
    summary: list[dict] = []
    for slot, (arch, rate, _seed_cell) in enumerate(specs):
        cv = results[slot]
        cell_name = f"{arch.name}@r{rate:g}"
        for fr in cv.folds:
            rows.append(SweepRow(cell_name, arch.name, config.name, rate, fr.fold,
                                 fr.train_acc_pct, fr.val_acc_pct, fr.gap_pct,
                                 fr.runtime_s, fr.error))
        ok = [f for f in cv.folds if f.error is None]
        summary.append({
            "cell": cell_name,
            "arch": arch.name,
            "config": config.name,
            "sample_rate": rate,
            "folds_ok": len(ok),
            "folds_failed": cv.n_failed,
            "mean_val_acc": cv.mean_val_acc_pct if ok else None,
            "std_val_acc": cv.std_val_acc_pct if ok else None,
            "mean_train_acc": cv.mean_train_acc_pct if ok else None,
            "mean_final_train_loss": cv.mean_final_train_loss if ok else None,
        })
    return ArchSweepResult(rows, summary)


def write_summary_json(summary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_csv(path: str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
