"""One-layer 1D CNN over per-tree outputs, with hand-written backprop and Adam.

All three heads share one shape: a first layer that slides a kernel of width
``W`` over the input row producing ``P`` positions of ``C`` channels, a
rectifier, and a fully connected layer to a scalar margin.

=================  ========  =====  =====================
variant            W         P      C
=================  ========  =====  =====================
interpretable      M         K      channels
conv_k3_s1         3         M*K    channels (padding 1)
fcnn_2layer_256    M*K       1      256
=================  ========  =====  =====================

For the interpretable head the kernel equals the stride equals ``M``, so
channel ``c`` applies one weight per tree position to every client block:
``conv_w[c, t]`` is a learned learning rate for tree ``t`` and the fully
connected weights ``fc_w[k*C + c]`` weigh each client's block.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .data import TaskKind
from .gbdt import sigmoid

FCNN_HIDDEN = 256


class HeadVariant(str, enum.Enum):
    INTERPRETABLE = "interpretable"
    CONV_K3_S1 = "conv_k3_s1"
    FCNN_2LAYER_256 = "fcnn_2layer_256"

    @classmethod
    def parse(cls, value: "str | HeadVariant") -> "HeadVariant":
        if isinstance(value, HeadVariant):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown head variant {value!r}") from None


@dataclass(frozen=True)
class CnnConfig:
    trees_per_client: int
    num_clients: int
    channels: int = 64
    head_variant: HeadVariant = HeadVariant.INTERPRETABLE

    def __post_init__(self):
        object.__setattr__(self, "head_variant", HeadVariant.parse(self.head_variant))
        if self.channels < 1 or self.trees_per_client < 1 or self.num_clients < 1:
            raise ValueError("channels, trees_per_client and num_clients must be >= 1")

    @property
    def input_width(self) -> int:
        return self.trees_per_client * self.num_clients

    @property
    def kernel(self) -> int:
        if self.head_variant is HeadVariant.INTERPRETABLE:
            return self.trees_per_client
        if self.head_variant is HeadVariant.CONV_K3_S1:
            return 3
        return self.input_width

    @property
    def positions(self) -> int:
        if self.head_variant is HeadVariant.INTERPRETABLE:
            return self.num_clients
        if self.head_variant is HeadVariant.CONV_K3_S1:
            return self.input_width
        return 1

    @property
    def out_channels(self) -> int:
        if self.head_variant is HeadVariant.FCNN_2LAYER_256:
            return FCNN_HIDDEN
        return self.channels

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        c = self.out_channels
        return (c, self.kernel), (c,), (self.positions * c,), (1,)


@dataclass(eq=False)
class CnnParams:
    """First-layer weights/biases and the scalar head; ``fc_b`` has shape (1,)."""

    conv_w: np.ndarray
    conv_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.conv_w, self.conv_b, self.fc_w, self.fc_b

    @classmethod
    def from_arrays(cls, arrays) -> "CnnParams":
        return cls(*(np.array(a, dtype=np.float64) for a in arrays))

    def copy(self) -> "CnnParams":
        return CnnParams.from_arrays(self.arrays())

    def zeros_like(self) -> "CnnParams":
        return CnnParams(*(np.zeros_like(a) for a in self.arrays()))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def __eq__(self, other) -> bool:
        if not isinstance(other, CnnParams):
            return NotImplemented
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))

    def check(self, config: CnnConfig) -> None:
        for name, a, shape in zip(("conv_w", "conv_b", "fc_w", "fc_b"), self.arrays(),
                                  config.shapes()):
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")


def param_count(trees_per_client: int, num_clients: int, channels: int = 64,
                variant: "HeadVariant | str" = HeadVariant.INTERPRETABLE) -> int:
    cfg = CnnConfig(trees_per_client, num_clients, channels, variant)
    return sum(int(np.prod(s)) for s in cfg.shapes())


def init_params(config: CnnConfig, seed: int = 0) -> CnnParams:
    """Kaiming normal (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    w_shape, b_shape, fc_shape, fcb_shape = config.shapes()
    conv_w = rng.normal(0.0, np.sqrt(2.0 / config.kernel), size=w_shape)
    fc_w = rng.normal(0.0, np.sqrt(2.0 / fc_shape[0]), size=fc_shape)
    return CnnParams(conv_w, np.zeros(b_shape), fc_w, np.zeros(fcb_shape))


# ---------------------------------------------------------------- forward


def _patches(config: CnnConfig, X: np.ndarray) -> np.ndarray:
    """Input windows seen by the first layer, shape ``(B, P, W)``."""
    B = X.shape[0]
    variant = config.head_variant
    if variant is HeadVariant.INTERPRETABLE:
        return X.reshape(B, config.num_clients, config.trees_per_client)
    if variant is HeadVariant.CONV_K3_S1:
        padded = np.pad(X, ((0, 0), (1, 1)))
        return np.lib.stride_tricks.sliding_window_view(padded, 3, axis=1)
    return X.reshape(B, 1, X.shape[1])


def _as_batch(config: CnnConfig, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != config.input_width:
        raise ValueError(f"expected rows of width {config.input_width}, got shape {X.shape}")
    return X


def _forward(config, params, X):
    patches = _patches(config, X)
    pre = patches @ params.conv_w.T + params.conv_b  # (B, P, C)
    act = np.maximum(pre, 0.0)
    flat = act.reshape(len(X), -1)
    return patches, pre, flat, flat @ params.fc_w + params.fc_b[0]


def forward(params: CnnParams, X, config: CnnConfig) -> "float | np.ndarray":
    """Margin for one row (returns float) or for each row of a matrix."""
    single = np.ndim(X) == 1
    X = _as_batch(config, X)
    out = _forward(config, params, X)[3]
    return float(out[0]) if single else out


def pre_activations(params: CnnParams, X, config: CnnConfig) -> np.ndarray:
    """First-layer pre-activations, shape ``(B, P, C)``."""
    X = _as_batch(config, X)
    return _patches(config, X) @ params.conv_w.T + params.conv_b


def batch_loss(task: TaskKind, margins: np.ndarray, y: np.ndarray) -> float:
    if task is TaskKind.REGRESSION:
        return float(np.mean(0.5 * (margins - y) ** 2))
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))


def loss_and_grad(params: CnnParams, X, y, task: "TaskKind | str",
                  config: CnnConfig) -> tuple[float, CnnParams]:
    """Mean batch loss and its exact gradient with respect to every parameter."""
    task = TaskKind.parse(task)
    X = _as_batch(config, X)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty batch")
    patches, pre, flat, m = _forward(config, params, X)
    B = len(X)
    if task is TaskKind.REGRESSION:
        resid = m - y
        loss = float(np.mean(0.5 * resid**2))
        dm = resid / B
    else:
        loss = float(np.mean(np.logaddexp(0.0, m) - y * m))
        dm = (sigmoid(m) - y) / B
    g_fc_w = flat.T @ dm
    g_fc_b = np.array([dm.sum()])
    dpre = (dm[:, None] * params.fc_w).reshape(pre.shape)
    dpre *= pre > 0.0  # subgradient 0 at the kink
    C = pre.shape[2]
    g_conv_b = dpre.reshape(-1, C).sum(axis=0)
    g_conv_w = dpre.reshape(-1, C).T @ patches.reshape(-1, patches.shape[2])
    return loss, CnnParams(g_conv_w, g_conv_b, g_fc_w, g_fc_b)


# ---------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError("alpha and epsilon must be positive")


@dataclass
class AdamState:
    step: int
    m: CnnParams
    v: CnnParams

    @classmethod
    def zeros(cls, params: CnnParams) -> "AdamState":
        return cls(0, params.zeros_like(), params.zeros_like())


def adam_step(params: CnnParams, state: AdamState, grads: CnnParams,
              config: AdamConfig) -> tuple[CnnParams, AdamState]:
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, m, v, g in zip(params.arrays(), state.m.arrays(), state.v.arrays(), grads.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - config.alpha * (m / c1) / (np.sqrt(v / c2) + config.epsilon))
        new_m.append(m)
        new_v.append(v)
    return CnnParams(*new_p), AdamState(t, CnnParams(*new_m), CnnParams(*new_v))


# ---------------------------------------------------------------- local training


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 100
    batch_size: int = 64

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


def client_update(params: CnnParams, X: np.ndarray, y: np.ndarray, task: "TaskKind | str",
                  config: CnnConfig, train_config: TrainConfig, adam: AdamConfig,
                  seed: int, history: list | None = None) -> CnnParams:
    """Run ``local_epochs`` of shuffled minibatch Adam from ``params``.

    Adam moments start from zero on every call. The last short batch is
    kept. When ``history`` is given, the mean training loss seen during each
    epoch is appended to it.
    """
    task = TaskKind.parse(task)
    X = _as_batch(config, X)
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("no local data")
    rng = np.random.default_rng(seed)
    params = params.copy()
    state = AdamState.zeros(params)
    B = train_config.batch_size
    for _ in range(train_config.local_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, B):
            idx = perm[start:start + B]
            loss, grads = loss_and_grad(params, X[idx], y[idx], task, config)
            params, state = adam_step(params, state, grads, adam)
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    return params


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"FGCN"
CHECKPOINT_VERSION = 1
_VARIANT_CODES = {HeadVariant.INTERPRETABLE: 0, HeadVariant.CONV_K3_S1: 1,
                  HeadVariant.FCNN_2LAYER_256: 2}
_HEADER = struct.Struct("<4sHBBIII")


class CheckpointFormatError(ValueError):
    pass


def checkpoint_header_size() -> int:
    # fixed header, then (ndim, dims...) for the four tensors: 2 + 1 + 1 + 1 dims
    return _HEADER.size + 4 * (4 + 2 + 1 + 1 + 1)


def encode_checkpoint(params: CnnParams, config: CnnConfig) -> bytes:
    """Little-endian float64 tensors in the order conv_w, conv_b, fc_w, fc_b."""
    params.check(config)
    out = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                        _VARIANT_CODES[config.head_variant], 0,
                        config.trees_per_client, config.num_clients, config.channels)]
    for a in params.arrays():
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in params.arrays():
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> tuple[CnnParams, CnnConfig]:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("checkpoint truncated in header")
    magic, version, code, _, m, k, c = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a CNN checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    variants = {v: k_ for k_, v in _VARIANT_CODES.items()}
    if code not in variants:
        raise CheckpointFormatError(f"unknown head variant code {code}")
    try:
        config = CnnConfig(m, k, c, variants[code])
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from None
    pos = _HEADER.size
    shapes = []
    for _ in range(4):
        if pos + 4 > len(data):
            raise CheckpointFormatError("checkpoint truncated in shape table")
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if ndim > 2 or pos + 4 * ndim > len(data):
            raise CheckpointFormatError("bad shape table")
        shapes.append(struct.unpack_from(f"<{ndim}I", data, pos))
        pos += 4 * ndim
    if tuple(shapes) != config.shapes():
        raise CheckpointFormatError("tensor shapes disagree with the header")
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointFormatError("checkpoint truncated in tensor data")
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos)
                      .astype(np.float64).reshape(shape))
        pos = end
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after tensor data")
    params = CnnParams(*arrays)
    if not all(np.isfinite(a).all() for a in arrays):
        raise CheckpointFormatError("non-finite parameter values")
    return params, config
