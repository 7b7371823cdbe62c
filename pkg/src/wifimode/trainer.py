"""Supervised and pseudo-label semi-supervised training.

The semi-supervised objective per epoch t is

    total = mean_b L(batch_b) + alpha(t) * mean_b' L(pseudo_batch_b')

where alpha(t) is 0 before t1, ramps linearly to alpha_final across
[t1, t2), and stays constant after.  Pseudo-labels are the model's own
argmax predictions over a sampled slice of the unlabelled pool,
refreshed every epoch (optionally every step).

All randomness (label shuffling, pseudo shuffling, dropout masks, pool
sampling) comes from independent child streams of one seed, so runs are
reproducible bit-for-bit and the labelled-data path is untouched by
whether a pseudo branch exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, nn
from .model import Model, train_loss_and_grads


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    lr: float = nn.ADAM_LR
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PseudoLabelConfig:
    """Knobs for the unlabelled branch.

    ``sample_rate`` is the fraction of the unlabelled pool drawn (without
    replacement) per training round; rounds > 1 grow the pseudo set with
    additional disjoint draws and restart the alpha ramp each round.
    """

    sample_rate: float = 0.2
    alpha_final: float = 3.0
    t1_epoch: int | None = None  # default: 20% of epochs
    t2_epoch: int | None = None  # default: all of them
    rounds: int = 1
    relabel_each_step: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError("sample_rate must be in [0, 1]")
        if self.alpha_final < 0:
            raise ValueError("alpha_final must be >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def resolve_ramp(self, epochs: int) -> tuple[int, int]:
        """Default ramp: hold alpha at 0 for the first fifth of training,
        then rise linearly so full strength is only reached at the end.
        Reaching alpha_final early leaves a long stretch where the model
        chases its own labels at full weight, which drifts badly when its
        accuracy is mediocre."""
        t1 = self.t1_epoch if self.t1_epoch is not None else int(round(0.2 * epochs))
        t2 = self.t2_epoch if self.t2_epoch is not None else epochs
        if t1 < 0 or t2 < t1:
            raise ValueError(f"need 0 <= t1 <= t2, got t1={t1} t2={t2}")
        return t1, t2


def alpha_schedule(epoch: int, t1: int, t2: int, alpha_final: float) -> float:
    """Pseudo-loss weight at an epoch: 0, linear ramp, then constant."""
    if epoch < t1:
        return 0.0
    if epoch >= t2:
        return alpha_final
    return alpha_final * (epoch - t1) / (t2 - t1)


def pseudo_label_assign(model: Model, X: np.ndarray) -> np.ndarray:
    """Model's own hard predictions used as stand-in labels."""
    return model.predict(X)


@dataclass
class TraceRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    alpha: float


@dataclass
class TrainResult:
    model: Model
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def final_train_loss(self) -> float:
        return self._last("train").loss

    @property
    def final_train_accuracy(self) -> float:
        return self._last("train").accuracy

    def _last(self, split: str) -> TraceRow:
        for row in reversed(self.rows):
            if row.split == split:
                return row
        raise ValueError(f"no {split!r} rows in trace")

    def write_trace(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,split,loss,accuracy,alpha\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.split},{r.loss!r},{r.accuracy!r},{r.alpha!r}\n")


def _epoch_batches(n: int, batch_size: int, order: np.ndarray,
                   merge_trailing_singleton: bool) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if merge_trailing_singleton and len(batches) > 1 and batches[-1].shape[0] == 1:
        batches[-2:] = [np.concatenate(batches[-2:])]
    return batches


def _draw_masks(rng: np.random.Generator, n_sites: int, batch: int, width: int,
                rate: float) -> np.ndarray:
    return (rng.random((n_sites, batch, width)) >= rate).astype(np.float64)


def _eval_xent(model: Model, Xn: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = model.eval_logits(Xn)
    loss, _ = nn.softmax_xent(logits, y)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def train_supervised(model: Model, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                     X_val: np.ndarray | None = None,
                     y_val: np.ndarray | None = None) -> TrainResult:
    """Train on labelled data only; returns the mutated model plus trace."""
    return _train(model, X, y, cfg, None, None, X_val, y_val)


def train_semisupervised(model: Model, X: np.ndarray, y: np.ndarray,
                         X_pool: np.ndarray, cfg: TrainConfig, plc: PseudoLabelConfig,
                         X_val: np.ndarray | None = None,
                         y_val: np.ndarray | None = None) -> TrainResult:
    """Train on labelled data plus self-labelled draws from ``X_pool``."""
    return _train(model, X, y, cfg, X_pool, plc, X_val, y_val)


def _train(model: Model, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
           X_pool: np.ndarray | None, plc: PseudoLabelConfig | None,
           X_val: np.ndarray | None, y_val: np.ndarray | None) -> TrainResult:
    n = X.shape[0]
    if n == 0:
        raise ValueError("no labelled training rows")
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() > 2:
        raise ValueError("labels must be class ids 0..2")
    use_bn = model.config.use_batchnorm
    if use_bn and (n < 2 or cfg.batch_size < 2):
        raise ValueError("batch normalization needs batches of >= 2 rows")

    Xn = np.ascontiguousarray(model.norm.apply(X))
    Xn_val = np.ascontiguousarray(model.norm.apply(X_val)) if X_val is not None else None
    if Xn_val is not None:
        y_val = np.ascontiguousarray(y_val, dtype=np.int64)

    pool_n = 0
    Xn_pool = None
    if X_pool is not None and plc is not None and plc.sample_rate > 0.0:
        Xn_pool = np.ascontiguousarray(model.norm.apply(X_pool))
        pool_n = Xn_pool.shape[0]

    ss = np.random.SeedSequence(cfg.seed)
    rng_shuffle_lab, rng_shuffle_pl, rng_dropout, rng_pool = \
        (np.random.default_rng(c) for c in ss.spawn(4))

    width = model.config.hidden_nodes
    n_sites = model.arch.block_count * (model.arch.layers_per_block - 1)
    use_dropout = model.config.use_dropout
    rate = model.config.dropout_rate

    names, params = model.params.trainable(use_bn)
    flat_params = [p.reshape(-1) for p in params]
    adam_m = [np.zeros_like(fp) for fp in flat_params]
    adam_v = [np.zeros_like(fp) for fp in flat_params]
    adam_t = 0
    backend = kernels.get_backend()

    rounds = plc.rounds if plc is not None else 1
    epochs_per_round = cfg.epochs
    t1 = t2 = 0
    if plc is not None:
        t1, t2 = plc.resolve_ramp(epochs_per_round)

    result = TrainResult(model)
    remaining_pool = np.arange(pool_n)
    active_pool = np.empty(0, dtype=np.int64)

    for rnd in range(rounds):
        if Xn_pool is not None:
            want = int(round(plc.sample_rate * pool_n))
            take = min(want, remaining_pool.shape[0])
            if take > 0:
                picked = rng_pool.choice(remaining_pool, size=take, replace=False)
                active_pool = np.concatenate([active_pool, np.sort(picked)])
                remaining_pool = np.setdiff1d(remaining_pool, picked, assume_unique=True)

        n_pl = active_pool.shape[0]
        Xn_pl = Xn_pool[active_pool] if n_pl else None
        y_pl: np.ndarray | None = None

        # a pseudo batch of one row cannot go through training-mode
        # batch norm, so a singleton pool stays unused
        min_pl = 2 if use_bn else 1

        for epoch in range(epochs_per_round):
            global_epoch = rnd * epochs_per_round + epoch
            alpha = (alpha_schedule(epoch, t1, t2, plc.alpha_final)
                     if n_pl >= min_pl else 0.0)
            pseudo_on = alpha > 0.0

            order = rng_shuffle_lab.permutation(n) if cfg.shuffle else np.arange(n)
            lab_batches = _epoch_batches(n, cfg.batch_size, order, use_bn)

            pl_batches: list[np.ndarray] = []
            if pseudo_on:
                if y_pl is None or not plc.relabel_each_step:
                    y_pl = np.ascontiguousarray(
                        np.argmax(model.eval_logits(Xn_pl), axis=1), dtype=np.int64)
                pl_order = rng_shuffle_pl.permutation(n_pl) if cfg.shuffle else np.arange(n_pl)
                pl_batches = _epoch_batches(n_pl, cfg.batch_size, pl_order, use_bn)

            n_steps = max(len(lab_batches), len(pl_batches)) if pseudo_on else len(lab_batches)
            lab_loss_sum = 0.0
            pl_loss_sum = 0.0
            correct = 0
            seen = 0

            for step in range(n_steps):
                idx = lab_batches[step % len(lab_batches)]
                Xb, yb = Xn[idx], y[idx]
                masks = (_draw_masks(rng_dropout, n_sites, Xb.shape[0], width, rate)
                         if use_dropout else None)
                loss, n_corr, grads = train_loss_and_grads(model, Xb, yb, masks,
                                                           update_running=True)
                lab_loss_sum += loss
                correct += n_corr
                seen += Xb.shape[0]

                if pseudo_on:
                    pidx = pl_batches[step % len(pl_batches)]
                    if plc.relabel_each_step:
                        # labels are only ever consumed batch-by-batch, so
                        # refreshing the imminent batch equals refreshing
                        # the whole pool at a fraction of the cost
                        y_pl[pidx] = np.argmax(model.eval_logits(Xn_pl[pidx]), axis=1)
                    Xpb, ypb = Xn_pl[pidx], y_pl[pidx]
                    pmasks = (_draw_masks(rng_dropout, n_sites, Xpb.shape[0], width, rate)
                              if use_dropout else None)
                    ploss, _, pgrads = train_loss_and_grads(model, Xpb, ypb, pmasks,
                                                            update_running=True)
                    pl_loss_sum += ploss
                    flat_grads = [(g + alpha * pg).reshape(-1)
                                  for g, pg in zip(grads, pgrads)]
                else:
                    flat_grads = [g.reshape(-1) for g in grads]

                adam_t += 1
                for fp, fg, m, v in zip(flat_params, flat_grads, adam_m, adam_v):
                    backend.adam_update(fp, fg, m, v, adam_t, cfg.lr,
                                        nn.ADAM_BETA1, nn.ADAM_BETA2, nn.ADAM_EPS)

            epoch_loss = lab_loss_sum / n_steps
            if pseudo_on:
                epoch_loss += alpha * (pl_loss_sum / n_steps)
            result.rows.append(TraceRow(global_epoch, "train", epoch_loss,
                                        correct / seen, alpha))
            if Xn_val is not None:
                vloss, vacc = _eval_xent(model, Xn_val, y_val)
                result.rows.append(TraceRow(global_epoch, "val", vloss, vacc, alpha))

    return result


@dataclass
class CombinedLoss:
    total: float
    labelled_term: float
    pseudo_term: float
    grads: list[np.ndarray]


def combined_loss(model: Model, lab_batches: list[tuple[np.ndarray, np.ndarray]],
                  pl_batches: list[tuple[np.ndarray, np.ndarray]],
                  alpha: float) -> CombinedLoss:
    """Side-effect-free evaluation of the two-term objective and gradient.

    Batches carry normalized inputs.  Each term is the mean of its
    per-batch cross-entropies; with no pseudo batches the result is
    exactly the supervised loss.
    """
    if not lab_batches:
        raise ValueError("need at least one labelled batch")
    names, params = model.params.trainable(model.config.use_batchnorm)
    acc = [np.zeros_like(p) for p in params]

    lab_term = 0.0
    for Xb, yb in lab_batches:
        loss, _, grads = train_loss_and_grads(model, Xb, yb)
        lab_term += loss
        for a, g in zip(acc, grads):
            a += g / len(lab_batches)
    lab_term /= len(lab_batches)

    pl_term = 0.0
    if pl_batches and alpha != 0.0:
        for Xb, yb in pl_batches:
            loss, _, grads = train_loss_and_grads(model, Xb, yb)
            pl_term += loss
            for a, g in zip(acc, grads):
                a += alpha * g / len(pl_batches)
        pl_term /= len(pl_batches)

    return CombinedLoss(lab_term + alpha * pl_term, lab_term, pl_term, acc)
