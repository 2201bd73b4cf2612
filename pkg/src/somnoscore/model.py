"""The scoring network: configuration, parameters, forward/backward, SGD.

The default configuration is a two-stage convolutional network over a
15000-sample window (five 30-second epochs at 100 Hz): 20 length-200 filters,
max-pool 20/10, a stacking reinterpretation into a 20-high image, 400
full-height 20x30 filters, max-pool 10/2, two 500-unit dense layers and a
5-way softmax. ReLU follows each convolution (before its pool) and each dense
layer.

A variant mode freezes the first layer to a generated Morlet wavelet bank so
the effect of learning (vs fixing) the input filters can be measured.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .edf_ingest import N_STAGES, SleepStage
from . import tensor_ops as T

CHECKPOINT_MAGIC = b"SOMN"
CHECKPOINT_VERSION = 1

TRAINABLE_MODE = "trainable"
FIXED_MORLET_MODE = "fixed_morlet"

_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class ModelConfig:
    input_len: int = 15000
    c1_filters: int = 20
    c1_len: int = 200
    p1: tuple[int, int] = (20, 10)          # (size, stride)
    c2_filters: int = 400
    c2_len: int = 30
    p2: tuple[int, int] = (10, 2)
    f1: int = 500
    f2: int = 500
    classes: int = N_STAGES
    l2_lambda: float = 1e-4
    l2_scope: str = "all"                   # "all" | "softmax_only"
    learning_rate: float = 0.003
    momentum: float = 0.9
    batch_size: int = 100
    max_iterations: int = 20000
    eval_every: int = 500
    patience: int = 10
    seed: int = 0
    first_layer_mode: str = TRAINABLE_MODE  # "trainable" | "fixed_morlet"
    dtype: str = "float32"
    morlet_min_hz: float = 0.5
    morlet_max_hz: float = 25.0
    morlet_cycles: float = 6.0

    def __post_init__(self):
        self.p1 = tuple(self.p1)
        self.p2 = tuple(self.p2)
        for name in ("input_len", "c1_filters", "c1_len", "c2_filters",
                     "c2_len", "f1", "f2", "classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(v <= 0 for v in (*self.p1, *self.p2)):
            raise ValueError("pool sizes and strides must be positive")
        if self.batch_size % self.classes != 0:
            raise ValueError(
                f"batch size {self.batch_size} not divisible by {self.classes} classes")
        if self.first_layer_mode not in (TRAINABLE_MODE, FIXED_MORLET_MODE):
            raise ValueError(f"unknown first_layer_mode {self.first_layer_mode!r}")
        if self.l2_scope not in ("all", "softmax_only"):
            raise ValueError(f"unknown l2_scope {self.l2_scope!r}")
        if np.dtype(self.dtype) not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    # Closed-form layer extents
    @property
    def c1_out(self) -> int:
        return self.input_len - self.c1_len + 1

    @property
    def p1_out(self) -> int:
        return 1 + (self.c1_out - self.p1[0]) // self.p1[1]

    @property
    def c2_out(self) -> int:
        return self.p1_out - self.c2_len + 1

    @property
    def p2_out(self) -> int:
        return 1 + (self.c2_out - self.p2[0]) // self.p2[1]

    @property
    def flat_size(self) -> int:
        return self.c2_filters * self.p2_out

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "c1_kernels": (self.c1_filters, self.c1_len),
            "c1_bias": (self.c1_filters,),
            "c2_kernels": (self.c2_filters, self.c1_filters, self.c2_len),
            "c2_bias": (self.c2_filters,),
            "f1_w": (self.f1, self.flat_size),
            "f1_b": (self.f1,),
            "f2_w": (self.f2, self.f1),
            "f2_b": (self.f2,),
            "out_w": (self.classes, self.f2),
            "out_b": (self.classes,),
        }

    def architecture_fields(self) -> dict:
        keys = ("input_len", "c1_filters", "c1_len", "p1", "c2_filters",
                "c2_len", "p2", "f1", "f2", "classes")
        return {k: getattr(self, k) for k in keys}

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["p1"] = list(self.p1)
        d["p2"] = list(self.p2)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        """Build from a possibly partial dict; omitted fields keep defaults."""
        d = dict(d)
        for key in ("p1", "p2"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def reduced_config(**overrides) -> ModelConfig:
    """A desk-scale architecture with the same layer structure.

    Used for gradient verification and the synthetic learning experiment;
    window length 300 implies 60-sample epochs.
    """
    base = dict(
        input_len=300, c1_filters=4, c1_len=20, p1=(4, 2),
        c2_filters=8, c2_len=5, p2=(4, 2), f1=16, f2=16,
        dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


WEIGHT_NAMES = ("c1_kernels", "c2_kernels", "f1_w", "f2_w", "out_w")
SOFTMAX_WEIGHT_NAMES = ("out_w",)


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    @property
    def n_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names)

    def l2_weight_names(self) -> tuple[str, ...]:
        names = SOFTMAX_WEIGHT_NAMES if self.config.l2_scope == "softmax_only" else WEIGHT_NAMES
        return tuple(n for n in names if n not in self.frozen)

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            velocity={k: v.copy() for k, v in self.velocity.items()},
            frozen=self.frozen,
        )


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    """Variance-preserving Gaussian initialization.

    ReLU-fed weights draw from Normal(0, sqrt(2/fan_in)); the softmax layer
    from Normal(0, sqrt(1/fan_in)). Biases start at zero. In fixed-Morlet mode
    the first layer is replaced by the generated wavelet bank and frozen.
    """
    dtype = config.np_dtype
    shapes = config.tensor_shapes()
    fan_in = {
        "c1_kernels": config.c1_len,
        "c2_kernels": config.c1_filters * config.c2_len,
        "f1_w": config.flat_size,
        "f2_w": config.f1,
        "out_w": config.f2,
    }

    def draw(name: str, gain: float) -> np.ndarray:
        std = np.sqrt(gain / fan_in[name])
        return (rng.standard_normal(shapes[name], dtype=dtype) * dtype.type(std))

    tensors = {
        "c1_kernels": draw("c1_kernels", 2.0),
        "c1_bias": np.zeros(shapes["c1_bias"], dtype=dtype),
        "c2_kernels": draw("c2_kernels", 2.0),
        "c2_bias": np.zeros(shapes["c2_bias"], dtype=dtype),
        "f1_w": draw("f1_w", 2.0),
        "f1_b": np.zeros(shapes["f1_b"], dtype=dtype),
        "f2_w": draw("f2_w", 2.0),
        "f2_b": np.zeros(shapes["f2_b"], dtype=dtype),
        "out_w": draw("out_w", 1.0),
        "out_b": np.zeros(shapes["out_b"], dtype=dtype),
    }
    frozen: frozenset[str] = frozenset()
    if config.first_layer_mode == FIXED_MORLET_MODE:
        freqs = default_morlet_frequencies(
            config.c1_filters, config.morlet_min_hz, config.morlet_max_hz)
        tensors["c1_kernels"] = make_morlet_bank(
            freqs, config.morlet_cycles, length=config.c1_len).astype(dtype)
        frozen = frozenset({"c1_kernels", "c1_bias"})
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
    return ModelParameters(config, tensors, velocity, frozen)


@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray          # C1 pre-ReLU
    r1: np.ndarray
    p1_idx: np.ndarray
    p1_out: np.ndarray
    s1: np.ndarray
    a2: np.ndarray          # C2 pre-ReLU, squeezed to (filters, length)
    r2: np.ndarray
    p2_idx: np.ndarray
    p2_out: np.ndarray
    flat: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    def shape_trace(self) -> list:
        return [
            self.a1.shape, self.p1_out.shape, self.s1.shape,
            self.a2.shape, self.p2_out.shape, self.flat.size,
            self.h1.size, self.h2.size, self.probs.size,
        ]

    def tie_signature(self) -> tuple:
        """Kink pattern of this pass: ReLU signs and pool argmax choices.

        Finite-difference checks compare signatures of the +/- evaluations to
        mask coordinates whose perturbation crosses a nondifferentiable point.
        """
        return (
            (self.a1 > 0).tobytes(), self.p1_idx.tobytes(),
            (self.a2 > 0).tobytes(), self.p2_idx.tobytes(),
            (self.z1 > 0).tobytes(), (self.z2 > 0).tobytes(),
        )


def forward(params: ModelParameters, signal: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.config
    t = params.tensors
    x = np.asarray(signal, dtype=cfg.np_dtype)
    if x.shape != (cfg.input_len,):
        raise ValueError(f"input length {x.shape} != ({cfg.input_len},)")

    a1 = T.conv1d_valid(x, t["c1_kernels"], t["c1_bias"])
    r1 = T.relu(a1)
    p1_out, p1_idx = T.maxpool1d(r1, *cfg.p1)
    s1 = T.stack(p1_out)
    a2 = T.conv2d_fullheight(s1, t["c2_kernels"], t["c2_bias"]).reshape(cfg.c2_filters, -1)
    r2 = T.relu(a2)
    p2_out, p2_idx = T.maxpool1d(r2, *cfg.p2)
    flat = p2_out.reshape(-1)
    z1 = T.dense(flat, t["f1_w"], t["f1_b"])
    h1 = T.relu(z1)
    z2 = T.dense(h1, t["f2_w"], t["f2_b"])
    h2 = T.relu(z2)
    logits = T.dense(h2, t["out_w"], t["out_b"])
    zc = np.asarray(logits, dtype=np.float64)
    zc = zc - zc.max()
    e = np.exp(zc)
    probs = e / e.sum()

    cache = ForwardCache(x, a1, r1, p1_idx, p1_out, s1, a2, r2, p2_idx, p2_out,
                         flat, z1, h1, z2, h2, logits, probs)
    return probs, cache


def backward(
    params: ModelParameters,
    cache: ForwardCache,
    label: SleepStage | int,
    include_l2: bool = True,
) -> dict[str, np.ndarray]:
    """Gradients of cross-entropy (plus, optionally, the L2 penalty).

    Frozen tensors receive no gradient entry. Batch loops pass
    include_l2=False and add the decay term once after averaging.
    """
    cfg = params.config
    t = params.tensors
    grads: dict[str, np.ndarray] = {}

    g_logits = cache.probs.copy()
    g_logits[int(label)] -= 1.0
    g_logits = g_logits.astype(cfg.np_dtype)

    g_h2, grads["out_w"], grads["out_b"] = T.dense_backward(cache.h2, t["out_w"], g_logits)
    g_z2 = T.relu_backward(cache.z2, g_h2)
    g_h1, grads["f2_w"], grads["f2_b"] = T.dense_backward(cache.h1, t["f2_w"], g_z2)
    g_z1 = T.relu_backward(cache.z1, g_h1)
    g_flat, grads["f1_w"], grads["f1_b"] = T.dense_backward(cache.flat, t["f1_w"], g_z1)

    g_p2 = g_flat.reshape(cfg.c2_filters, cfg.p2_out)
    g_r2 = T.maxpool1d_backward(cache.p2_idx, g_p2, cfg.c2_out)
    g_a2 = T.relu_backward(cache.a2, g_r2)
    g_s1, grads["c2_kernels"], grads["c2_bias"] = T.conv2d_fullheight_backward(
        cache.s1, t["c2_kernels"], g_a2.reshape(cfg.c2_filters, 1, cfg.c2_out))

    if "c1_kernels" not in params.frozen:
        g_p1 = T.unstack(g_s1)
        g_r1 = T.maxpool1d_backward(cache.p1_idx, g_p1, cfg.c1_out)
        g_a1 = T.relu_backward(cache.a1, g_r1)
        _, grads["c1_kernels"], grads["c1_bias"] = T.conv1d_backward(
            cache.x, t["c1_kernels"], g_a1)

    if include_l2 and cfg.l2_lambda:
        for name in params.l2_weight_names():
            grads[name] = grads[name] + cfg.l2_lambda * t[name]
    return grads


def loss_for_window(params: ModelParameters, signal: np.ndarray, label: SleepStage | int,
                    include_l2: bool = True) -> float:
    """Scalar training objective for one window (finite-difference target)."""
    probs, _ = forward(params, signal)
    loss = float(-np.log(probs[int(label)]))
    if include_l2 and params.config.l2_lambda:
        weights = [params.tensors[n] for n in params.l2_weight_names()]
        penalty, _ = T.l2_penalty(weights, params.config.l2_lambda)
        loss += penalty
    return loss


def sgd_step(params: ModelParameters, gradients: dict[str, np.ndarray],
             learning_rate: float, momentum: float) -> None:
    """Momentum-SGD update in place: v <- mu*v - lr*g; w <- w + v."""
    for name, g in gradients.items():
        if name in params.frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
        v = params.velocity[name]
        v *= momentum
        v -= learning_rate * g
        params.tensors[name] += v
    # Tensors with no gradient this step still see velocity decay.
    for name in params.trainable_names:
        if name not in gradients:
            params.velocity[name] *= momentum
            params.tensors[name] += params.velocity[name]


def predict(params: ModelParameters, signal: np.ndarray) -> SleepStage:
    probs, _ = forward(params, signal)
    return predict_from_probs(probs)


def predict_from_probs(probs: np.ndarray) -> SleepStage:
    """Argmax stage; ties break to the lowest stage index."""
    return SleepStage(int(np.argmax(probs)))


def default_morlet_frequencies(n: int, min_hz: float = 0.5, max_hz: float = 25.0) -> np.ndarray:
    return np.geomspace(min_hz, max_hz, n)


def make_morlet_bank(
    center_freqs: np.ndarray,
    cycles_per_filter: float,
    fs: float = 100.0,
    length: int = 200,
) -> np.ndarray:
    """Real Morlet (cosine-Gaussian) filters, one row per center frequency.

    Each filter is cos(2*pi*f*t) * exp(-t^2 / (2*sigma^2)) with
    sigma = cycles / (2*pi*f), sampled symmetrically about t = 0 and scaled to
    unit energy. A Gaussian still above 1% of its peak at the window edge is
    truncated; that raises a warning, not an error.
    """
    freqs = np.asarray(center_freqs, dtype=np.float64)
    if np.any(freqs <= 0):
        raise ValueError("center frequencies must be positive")
    t = (np.arange(length) - (length - 1) / 2.0) / fs
    bank = np.empty((len(freqs), length))
    for i, f in enumerate(freqs):
        sigma = cycles_per_filter / (2.0 * np.pi * f)
        envelope = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
        if envelope[0] > 0.01:
            warnings.warn(
                f"Morlet filter at {f:.3g} Hz truncated: envelope {envelope[0]:.3f} "
                f"of peak at window edge", RuntimeWarning, stacklevel=2)
        k = np.cos(2.0 * np.pi * f * t) * envelope
        bank[i] = k / np.linalg.norm(k)
    return bank


# --- checkpoint format ------------------------------------------------------
# magic "SOMN" | u16 version | u32 config-JSON length | config JSON |
# per-tensor records (u16 name len, name, u8 dtype code, u8 ndim, u32 dims,
# raw little-endian values) | u64 CRC-64 of everything before it.

_CRC64_POLY = 0x42F0E1EBA9EA3693


def _crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            crc = ((crc << 1) ^ _CRC64_POLY if crc & (1 << 63) else crc << 1)
            crc &= 0xFFFFFFFFFFFFFFFF
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    for b in data:
        crc = ((crc << 8) & 0xFFFFFFFFFFFFFFFF) ^ _CRC64_TABLE[((crc >> 56) ^ b) & 0xFF]
    return crc


class CheckpointError(Exception):
    pass


def save_checkpoint(params: ModelParameters, path: Path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    manifest = {
        "config": params.config.to_json_dict(),
        "frozen": sorted(params.frozen),
        "tensors": list(params.tensors.keys()),
    }
    cfg_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_bytes)))
    chunks.append(cfg_bytes)
    for name, arr in params.tensors.items():
        name_b = name.encode("utf-8")
        a = np.ascontiguousarray(arr)
        code = _DTYPE_CODES[a.dtype]
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.astype(a.dtype.newbyteorder("<")).tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<Q", crc64(body)))


def load_checkpoint(path: Path, expect_config: ModelConfig | None = None) -> ModelParameters:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, crc_stored = data[:-8], struct.unpack("<Q", data[-8:])[0]
    if crc64(body) != crc_stored:
        raise CheckpointError(f"{path}: checksum failure (corrupt or truncated)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != {CHECKPOINT_VERSION}")
    (cfg_len,) = struct.unpack_from("<I", body, 6)
    pos = 10
    manifest = json.loads(body[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    config = ModelConfig.from_json_dict(manifest["config"])
    if expect_config is not None:
        got, want = config.architecture_fields(), expect_config.architecture_fields()
        if got != want:
            raise CheckpointError(
                f"{path}: checkpoint architecture {got} does not match expected {want}")
    tensors: dict[str, np.ndarray] = {}
    while pos < len(body):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        tensors[name] = arr.reshape(shape).astype(_CODE_DTYPES[code])
    expected = config.tensor_shapes()
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {tensors[name].shape} != {shape}")
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
    return ModelParameters(config, tensors, velocity, frozenset(manifest["frozen"]))
