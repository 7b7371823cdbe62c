"""Neural-net primitives with hand-written gradients.

Everything is plain float64 numpy: dense layers, ReLU, batch
normalization, inverted dropout, softmax cross-entropy, Adam, and a
central-difference gradient checker used to validate all of the above.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # keep-fraction of the running statistic per batch


def he_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """He-uniform weight init: U(-limit, limit) with limit = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def dense_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """X (B, n_in) @ W.T (n_in, n_out) + b."""
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"dense shape mismatch: X {X.shape} vs W {W.shape}")
    if b.shape != (W.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match W {W.shape}")
    return X @ W.T + b


def dense_backward(X: np.ndarray, W: np.ndarray,
                   dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dX, dW, db) for dense_forward given upstream dout."""
    if dout.shape != (X.shape[0], W.shape[0]):
        raise ValueError(f"dout shape {dout.shape} does not match ({X.shape[0]}, {W.shape[0]})")
    dX = dout @ W
    dW = dout.T @ X
    db = dout.sum(axis=0)
    return dX, dW, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return dout * (x > 0)


def bn_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float = BN_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-statistics normalization; returns (out, xhat, inv_std, mean, var).

    Variance is the population variance of the batch.  A batch of one has
    zero variance everywhere, which silently kills gradients, so it is
    rejected here.
    """
    if x.shape[0] < 2:
        raise ValueError("batch normalization in training mode needs batch size >= 2")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std, mean, var


def bn_eval_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = BN_EPS) -> np.ndarray:
    xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return gamma * xhat + beta


def bn_backward(dout: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta) through batch-statistics normalization."""
    B = dout.shape[0]
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = (inv_std / B) * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one normalized layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, width: int) -> "BatchNormState":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))


def batchnorm_forward(state: BatchNormState, x: np.ndarray,
                      training: bool) -> tuple[np.ndarray, tuple | None]:
    """Stateful forward; updates running stats in training mode.

    Returns (out, cache); the cache feeds batchnorm_backward and is None in
    eval mode.
    """
    if not training:
        return bn_eval_forward(x, state.gamma, state.beta,
                               state.running_mean, state.running_var, state.eps), None
    out, xhat, inv_std, mean, var = bn_train_forward(x, state.gamma, state.beta, state.eps)
    m = state.momentum
    state.running_mean = m * state.running_mean + (1.0 - m) * mean
    state.running_var = m * state.running_var + (1.0 - m) * var
    return out, (xhat, inv_std, state.gamma)


def batchnorm_backward(cache: tuple, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma = cache
    return bn_backward(dout, xhat, inv_std, gamma)


def dropout_forward(x: np.ndarray, rate: float, training: bool,
                    rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: scales kept units by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit Generator")
    mask = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * mask / (1.0 - rate), mask


def dropout_backward(dout: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    return dout * mask / (1.0 - rate)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(y: np.ndarray, n_classes: int = 3) -> np.ndarray:
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels out of range [0, {n_classes})")
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt logits.

    Computed from shifted log-sum-exp, never from exponentiated
    probabilities, so large logits cannot overflow.
    """
    if logits.shape[0] != y.shape[0]:
        raise ValueError("logits/labels batch size mismatch")
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(B), y]))
    p = softmax(logits)
    p[np.arange(B), y] -= 1.0
    return loss, p / B


ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
                beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam step, in place, for step count t >= 1."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class AdamState:
    """First/second moment buffers for a fixed list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = ADAM_LR) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], lr=lr)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter list changed size under the optimizer")
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            adam_update(p, g, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(loss_fn, params: list[np.ndarray], grads: list[np.ndarray],
               names: list[str] | None = None, step: float = 1e-5,
               tol: float = 1e-4, max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic grads against central differences of ``loss_fn``.

    ``loss_fn`` re-evaluates the scalar loss at the current parameter
    values; each coordinate is perturbed by +/-step in place and restored.
    Relative error uses max(|analytic|, |numeric|, 1e-6) in the
    denominator so near-zero gradients do not divide by zero.  A pair
    agreeing within ``abs_floor`` counts as an exact match: on dead relu
    paths the analytic gradient is 0 and the difference quotient picks up
    ~1e-10 of float noise, which the 1e-6 denominator would otherwise
    inflate past tol.  With ``max_entries_per_param`` set, that many
    coordinates are sampled per array instead of sweeping all of them.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    report = GradCheckReport(tol=tol)
    for p, g, name in zip(params, grads, names):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        if max_entries_per_param is not None and flat_p.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat_p.size, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(flat_p.size)
        worst = 0.0
        worst_idx: tuple[int, ...] = ()
        for i in idxs:
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = loss_fn()
            flat_p[i] = orig - step
            lo = loss_fn()
            flat_p[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            diff = abs(flat_g[i] - numeric)
            if diff <= abs_floor:
                continue
            denom = max(abs(flat_g[i]), abs(numeric), 1e-6)
            rel = diff / denom
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(i, p.shape)
        report.entries.append(GradCheckEntry(name, worst, worst_idx))
    return report
