"""Residual MLP classifier: configuration grid, parameters, persistence.

Width/regularization configs are named like "c10": width letter a/b/c/d
(5/10/15/20 hidden nodes), then a batch-norm digit and a dropout digit.
Architectures follow the depth-naming convention
``depth = block_count * layers_per_block + 2`` (the stem and the output
head are the two extra weighted layers), so e.g. ResNet122 is 40 blocks
of 3 layers.

Block layout, for input x of width H:

    h = x
    repeat layers_per_block times:
        h = batchnorm(h)        (if enabled)
        h = dense(h)
        h = relu(h); dropout(h) (all but the block's last layer)
    y = h + x                   (identity shortcut; plain nets skip it)

The stem is a plain affine map n_in -> H and the head is affine H -> 3;
no activation after the shortcut add.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, nn
from .features import N_FEATURES, NormalizationStats

FORMAT_VERSION = 1
N_CLASSES = 3

CONFIG_WIDTHS = {"a": 5, "b": 10, "c": 15, "d": 20}
_WIDTH_LETTERS = {v: k for k, v in CONFIG_WIDTHS.items()}

# depths with an established layers-per-block reading
_KNOWN_DEPTH_LPB = {10: 2, 18: 2, 34: 2, 50: 3, 74: 3, 101: 3, 122: 3, 152: 3}

DEFAULT_DROPOUT_RATE = 0.5


@dataclass(frozen=True)
class ModelConfig:
    """Width plus regularization switches for every hidden layer."""

    hidden_nodes: int
    use_batchnorm: bool
    use_dropout: bool
    dropout_rate: float = DEFAULT_DROPOUT_RATE

    def __post_init__(self) -> None:
        if self.hidden_nodes not in _WIDTH_LETTERS:
            raise ValueError(f"hidden_nodes must be one of {sorted(_WIDTH_LETTERS)}, "
                             f"got {self.hidden_nodes}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in (0, 1), got {self.dropout_rate}")

    @property
    def name(self) -> str:
        return (f"{_WIDTH_LETTERS[self.hidden_nodes]}"
                f"{int(self.use_batchnorm)}{int(self.use_dropout)}")

    @classmethod
    def from_name(cls, name: str) -> "ModelConfig":
        name = name.strip().lower()
        if (len(name) != 3 or name[0] not in CONFIG_WIDTHS
                or name[1] not in "01" or name[2] not in "01"):
            raise ValueError(f"config name must look like 'c10', got {name!r}")
        return cls(CONFIG_WIDTHS[name[0]], name[1] == "1", name[2] == "1")

    def to_dict(self) -> dict:
        return {"hidden_nodes": self.hidden_nodes, "use_batchnorm": self.use_batchnorm,
                "use_dropout": self.use_dropout, "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(int(d["hidden_nodes"]), bool(d["use_batchnorm"]),
                   bool(d["use_dropout"]), float(d.get("dropout_rate", DEFAULT_DROPOUT_RATE)))


def all_config_names() -> list[str]:
    return [f"{w}{b}{d}" for w in "abcd" for b in "01" for d in "01"]


@dataclass(frozen=True)
class ArchitectureSpec:
    """Residual-stack shape: block count, layers per block, shortcut on/off."""

    block_count: int
    layers_per_block: int
    residual: bool = True

    def __post_init__(self) -> None:
        if self.layers_per_block < 2:
            raise ValueError("layers_per_block must be >= 2 (a block needs an inner ReLU)")
        if self.block_count < 1:
            raise ValueError("block_count must be >= 1")

    @property
    def depth(self) -> int:
        return self.block_count * self.layers_per_block + 2

    @property
    def n_hidden_layers(self) -> int:
        return self.block_count * self.layers_per_block

    @property
    def name(self) -> str:
        return f"{'ResNet' if self.residual else 'Plain'}{self.depth}"

    @classmethod
    def from_depth(cls, depth: int, layers_per_block: int | None = None,
                   residual: bool = True) -> "ArchitectureSpec":
        if layers_per_block is None:
            if depth not in _KNOWN_DEPTH_LPB:
                raise ValueError(f"no conventional layers-per-block for depth {depth}; "
                                 f"pass layers_per_block explicitly")
            layers_per_block = _KNOWN_DEPTH_LPB[depth]
        if (depth - 2) % layers_per_block != 0:
            raise ValueError(f"depth {depth} does not decompose into blocks of {layers_per_block}")
        return cls((depth - 2) // layers_per_block, layers_per_block, residual)

    @classmethod
    def from_name(cls, name: str) -> "ArchitectureSpec":
        text = name.strip()
        lowered = text.lower()
        if lowered.startswith("resnet"):
            residual, digits = True, text[6:]
        elif lowered.startswith("plain"):
            residual, digits = False, text[5:]
        else:
            raise ValueError(f"architecture name must start with ResNet or Plain, got {name!r}")
        if not digits.isdigit():
            raise ValueError(f"bad architecture name {name!r}")
        return cls.from_depth(int(digits), residual=residual)

    def to_dict(self) -> dict:
        return {"block_count": self.block_count, "layers_per_block": self.layers_per_block,
                "residual": self.residual}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(int(d["block_count"]), int(d["layers_per_block"]), bool(d.get("residual", True)))


SWEEP_ARCH_NAMES = ("ResNet10", "ResNet18", "ResNet34", "ResNet50",
                    "ResNet74", "ResNet101", "ResNet122", "ResNet152")


@dataclass
class PackedParams:
    """All network arrays, C-contiguous float64, in kernel call order."""

    Wi: np.ndarray
    bi: np.ndarray
    Wh: np.ndarray
    bh: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    FIELDS = ("Wi", "bi", "Wh", "bh", "gamma", "beta", "run_mean", "run_var", "Wo", "bo")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def trainable(self, use_bn: bool) -> tuple[list[str], list[np.ndarray]]:
        names = ["Wi", "bi", "Wh", "bh"]
        if use_bn:
            names += ["gamma", "beta"]
        names += ["Wo", "bo"]
        return names, [getattr(self, n) for n in names]

    def copy(self) -> "PackedParams":
        return PackedParams(**{n: getattr(self, n).copy() for n in self.FIELDS})


def init_params(arch: ArchitectureSpec, width: int, seed: int,
                n_in: int = N_FEATURES) -> PackedParams:
    """He-uniform weights, zero biases, unit-scale normalization params.

    Draw order is fixed (stem, hidden layers in order, head) so a seed
    pins every array.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    L = arch.n_hidden_layers
    Wi = nn.he_uniform(rng, n_in, (width, n_in))
    Wh = np.empty((L, width, width))
    for l in range(L):
        Wh[l] = nn.he_uniform(rng, width, (width, width))
    Wo = nn.he_uniform(rng, width, (N_CLASSES, width))
    return PackedParams(
        Wi=Wi, bi=np.zeros(width),
        Wh=Wh, bh=np.zeros((L, width)),
        gamma=np.ones((L, width)), beta=np.zeros((L, width)),
        run_mean=np.zeros((L, width)), run_var=np.ones((L, width)),
        Wo=Wo, bo=np.zeros(N_CLASSES),
    )


@dataclass
class Model:
    """Classifier = config + architecture + normalization + parameters."""

    config: ModelConfig
    arch: ArchitectureSpec
    seed: int
    norm: NormalizationStats
    params: PackedParams
    n_in: int = N_FEATURES

    @classmethod
    def build(cls, config: ModelConfig, arch: ArchitectureSpec, seed: int,
              norm: NormalizationStats | None = None, n_in: int = N_FEATURES) -> "Model":
        if norm is None:
            norm = NormalizationStats.identity(n_in)
        return cls(config, arch, seed, norm,
                   init_params(arch, config.hidden_nodes, seed, n_in), n_in)

    # -- inference ---------------------------------------------------------

    def eval_logits(self, Xn: np.ndarray) -> np.ndarray:
        """Logits for already-normalized inputs."""
        p = self.params
        return kernels.get_backend().forward_eval(
            np.ascontiguousarray(Xn), p.Wi, p.bi, p.Wh, p.bh,
            p.gamma, p.beta, p.run_mean, p.run_var, p.Wo, p.bo,
            self.arch.layers_per_block, self.config.use_batchnorm, self.arch.residual)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return nn.softmax(self.eval_logits(self.norm.apply(X)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.eval_logits(self.norm.apply(X)), axis=1)

    @property
    def num_trainable_params(self) -> int:
        _, arrays = self.params.trainable(self.config.use_batchnorm)
        return int(sum(a.size for a in arrays))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "arch": self.arch.to_dict(),
            "seed": self.seed,
            "n_in": self.n_in,
            "norm_stats": self.norm.to_dict(),
            "parameters": {name: _encode_array(arr)
                           for name, arr in self.params.as_dict().items()},
        }

    @classmethod
    def load(cls, path: str) -> "Model":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {data.get('format_version')!r}")
        params = PackedParams(**{name: _decode_array(data["parameters"][name])
                                 for name in PackedParams.FIELDS})
        return cls(ModelConfig.from_dict(data["config"]),
                   ArchitectureSpec.from_dict(data["arch"]),
                   int(data["seed"]),
                   NormalizationStats.from_dict(data["norm_stats"]),
                   params, int(data.get("n_in", N_FEATURES)))


def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    if entry["dtype"] != "<f8":
        raise ValueError(f"unsupported array dtype {entry['dtype']!r}")
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()


def train_loss_and_grads(model: Model, Xn: np.ndarray, y: np.ndarray,
                         drop_masks: np.ndarray | None = None,
                         update_running: bool = False) -> tuple[float, int, list[np.ndarray]]:
    """Training-mode loss/correct-count/gradients for the trainable arrays.

    Dropout applies only when masks are passed; running stats move only
    when ``update_running`` is set, so the default call has no side
    effects and is safe for loss probes and gradient checking.
    """
    p = model.params
    cfg = model.config
    use_dropout = drop_masks is not None
    if not use_dropout:
        drop_masks = np.empty((0, Xn.shape[0], cfg.hidden_nodes))
    scale = 1.0 / (1.0 - cfg.dropout_rate) if use_dropout else 1.0
    out = kernels.get_backend().forward_backward(
        np.ascontiguousarray(Xn), np.ascontiguousarray(y, dtype=np.int64),
        p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta, p.run_mean, p.run_var, p.Wo, p.bo,
        model.arch.layers_per_block, cfg.use_batchnorm, model.arch.residual,
        update_running, nn.BN_MOMENTUM, drop_masks, scale, use_dropout)
    loss, n_correct = out[0], out[1]
    by_name = dict(zip(("Wi", "bi", "Wh", "bh", "gamma", "beta", "Wo", "bo"), out[2:]))
    names, _ = p.trainable(cfg.use_batchnorm)
    return float(loss), int(n_correct), [by_name[n] for n in names]


def gradcheck_model(model: Model, Xn: np.ndarray, y: np.ndarray,
                    step: float = 1e-5, tol: float = 1e-4,
                    max_entries_per_param: int | None = 200,
                    jitter: float = 0.05) -> nn.GradCheckReport:
    """Central-difference check of the fused kernel gradients.

    Runs in training mode with dropout off and frozen running stats;
    the loss is then a deterministic function of the parameters.  The
    check point is the init nudged by small uniform noise: zero biases
    park relu pre-activations of fully dead rows exactly on the kink,
    where a central difference disagrees with any one-sided subgradient.
    """
    model = replace(model, params=model.params.copy())
    names, params = model.params.trainable(model.config.use_batchnorm)
    if jitter:
        jrng = np.random.default_rng(98765)
        for p in params:
            p += jrng.uniform(-jitter, jitter, size=p.shape)
    _, _, grads = train_loss_and_grads(model, Xn, y)

    def loss_fn() -> float:
        return train_loss_and_grads(model, Xn, y)[0]

    return nn.grad_check(loss_fn, params, grads, names, step=step, tol=tol,
                         max_entries_per_param=max_entries_per_param,
                         rng=np.random.default_rng(12345))
