"""Convolutional encoder, attention ConvLSTM and stacked deconvolutional decoder.

A forward pass maps a batch of signature sequences ``(B, h, n, n, s)`` to
reconstructions of each sequence's last tensor ``(B, n, n, s)``.

Ablation modes:

``full``
    ConvLSTM at all four levels, temporal attention on each.
``no_attention``
    ConvLSTM at all four levels, the last hidden map is used directly.
``convlstm_last2``
    ConvLSTM only at levels 3 and 4 (no attention); levels 1 and 2 pass the
    last step's encoder maps to the decoder.
``convlstm_last1``
    ConvLSTM only at level 4 (no attention).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, conv2d, deconv2d, selu, sigmoid, softmax, tanh
from .errors import ConfigError, IncompatibleCheckpointError, ShapeError, TrainingDivergedError
from .io_utils import atomic_write_bytes, atomic_write_text
from .signature import SequenceDataset

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": ((1, 2, 3, 4), True),
    "no_attention": ((1, 2, 3, 4), False),
    "convlstm_last2": ((3, 4), False),
    "convlstm_last1": ((4,), False),
}
GATES = ("z", "r", "c", "o")


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    c_in: int
    c_out: int
    stride: int


@dataclass(frozen=True)
class Architecture:
    n: int
    s: int = 3
    channels: tuple[int, ...] = (32, 64, 128, 256)
    kernels: tuple[int, ...] = (3, 3, 2, 2)
    strides: tuple[int, ...] = (1, 2, 2, 2)

    def __post_init__(self):
        if not len(self.channels) == len(self.kernels) == len(self.strides) == 4:
            raise ConfigError("architecture needs exactly four encoder levels")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))

    def encoder(self) -> list[LayerSpec]:
        ins = (self.s,) + self.channels[:-1]
        return [LayerSpec(k, ci, co, st) for k, ci, co, st in zip(self.kernels, ins, self.channels, self.strides)]

    def decoder(self) -> dict[int, LayerSpec]:
        """DeConv level l -> spec; level l mirrors encoder level l."""
        outs = (self.s,) + self.channels[:-1]
        specs = {}
        for l in range(4, 0, -1):
            c_in = self.channels[l - 1] if l == 4 else 2 * self.channels[l - 1]
            specs[l] = LayerSpec(self.kernels[l - 1], c_in, outs[l - 1], self.strides[l - 1])
        return specs

    def sizes(self) -> list[int]:
        """Spatial size at levels 0..4."""
        out = [self.n]
        for st in self.strides:
            out.append(ad.conv_output_size(out[-1], st))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def parameter_shapes(arch: Architecture, ablation: str = "full") -> dict[str, tuple]:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
    recurrent, _ = ABLATIONS[ablation]
    sizes = arch.sizes()
    shapes: dict[str, tuple] = {}
    for l, spec in enumerate(arch.encoder(), start=1):
        shapes[f"enc{l}.W"] = (spec.kernel, spec.kernel, spec.c_in, spec.c_out)
        shapes[f"enc{l}.b"] = (spec.c_out,)
    for l in recurrent:
        k, d, nl = arch.kernels[l - 1], arch.channels[l - 1], sizes[l]
        for g in GATES:
            shapes[f"lstm{l}.W_x{g}"] = (k, k, d, d)
            shapes[f"lstm{l}.W_h{g}"] = (k, k, d, d)
        for g in ("z", "r", "o"):
            shapes[f"lstm{l}.W_c{g}"] = (nl, nl, d)
        for g in GATES:
            shapes[f"lstm{l}.b_{g}"] = (d,)
    for l, spec in arch.decoder().items():
        shapes[f"dec{l}.W"] = (spec.kernel, spec.kernel, spec.c_in, spec.c_out)
        shapes[f"dec{l}.b"] = (spec.c_out,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return 1


def init_arrays(arch: Architecture, ablation: str = "full", seed: int = 0) -> dict[str, np.ndarray]:
    """Normal(0, 1/sqrt(fan_in)) kernels; zero biases and zero peephole maps."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in parameter_shapes(arch, ablation).items():
        if len(shape) == 4:
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(_fan_in(name, shape)), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return arrays


@dataclass(eq=False)
class ModelParams:
    """Everything inference needs: weights, settings and normalization stats."""

    arch: Architecture
    arrays: dict
    ablation: str = "full"
    h: int = 5
    chi: float = 5.0
    scales: tuple[int, ...] = (10, 30, 60)
    gap: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.h < 1 or self.chi <= 0:
            raise ConfigError("need h >= 1 and chi > 0")
        if len(self.scales) != self.arch.s:
            raise ConfigError(f"{len(self.scales)} scales for an architecture with s={self.arch.s}")
        if self.mean is None:
            self.mean = np.zeros(self.arch.n)
        if self.std is None:
            self.std = np.ones(self.arch.n)
        expected = parameter_shapes(self.arch, self.ablation)
        if set(expected) != set(self.arrays):
            raise ConfigError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise ShapeError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, arch: Architecture, ablation="full", h=5, chi=5.0, scales=(10, 30, 60), gap=10, seed=0, **kw):
        return cls(arch, init_arrays(arch, ablation, seed), ablation, h, chi, tuple(scales), gap, **kw)

    def config(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "ablation": self.ablation,
            "h": self.h,
            "chi": self.chi,
            "scales": list(self.scales),
            "gap": self.gap,
        }

    def config_hash(self) -> str:
        return config_hash(self.config())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.arrays):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return digest.hexdigest()

    def copy(self) -> "ModelParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# network pieces
# ---------------------------------------------------------------------------


def encode(x, weights: Mapping[str, Tensor], arch: Architecture) -> list[Tensor]:
    """Feature maps of encoder levels 1..4 for input ``(B, n, n, s)``."""
    maps, cur = [], x
    for l, spec in enumerate(arch.encoder(), start=1):
        cur = selu(conv2d(cur, weights[f"enc{l}.W"], weights[f"enc{l}.b"], spec.stride))
        maps.append(cur)
    return maps


class ConvLSTMKernels:
    """Gate kernels of one level fused into a single convolution over ``[X, H]``."""

    def __init__(self, weights: Mapping[str, Tensor], level: int):
        p = f"lstm{level}."
        self.kernel = concat(
            [concat([weights[p + f"W_x{g}"], weights[p + f"W_h{g}"]], axis=2) for g in GATES], axis=3
        )
        self.bias = concat([weights[p + f"b_{g}"] for g in GATES], axis=0)
        self.peep = {g: weights[p + f"W_c{g}"] for g in ("z", "r", "o")}
        self.d = weights[p + "b_z"].shape[0]


def convlstm_step(x, h_prev, c_prev, kernels: ConvLSTMKernels, return_gates: bool = False):
    """One peephole ConvLSTM update; returns ``(H, C)`` (and gates if asked)."""
    d = kernels.d
    pre = conv2d(concat([x, h_prev], axis=-1), kernels.kernel, kernels.bias, 1)
    z = sigmoid(pre[..., 0:d] + kernels.peep["z"] * c_prev)
    r = sigmoid(pre[..., d : 2 * d] + kernels.peep["r"] * c_prev)
    c = z * tanh(pre[..., 2 * d : 3 * d]) + r * c_prev
    o = sigmoid(pre[..., 3 * d : 4 * d] + kernels.peep["o"] * c)
    h = o * tanh(c)
    if return_gates:
        return h, c, {"z": z, "r": r, "o": o}
    return h, c


def attention(history: list, chi: float):
    """Softmax-weighted sum of hidden maps, scored against the last one.

    Returns the refined map and the weights, shape ``(B, len(history))``.
    """
    last = history[-1]
    axes = tuple(range(1, last.value.ndim))
    scores = ad.stack([ad.scale(ad.sum_(last * hi, axis=axes), 1.0 / chi) for hi in history], axis=1)
    alpha = softmax(scores, axis=1)
    bshape = (alpha.shape[0],) + (1,) * (last.value.ndim - 1)
    refined = None
    for i, hi in enumerate(history):
        term = ad.reshape(alpha[:, i], bshape) * hi
        refined = term if refined is None else refined + term
    return refined, alpha


def decode(refined: list, weights: Mapping[str, Tensor], arch: Architecture) -> Tensor:
    """Stacked decoder; ``refined[l-1]`` is the level-l map."""
    sizes = arch.sizes()
    specs = arch.decoder()
    out = None
    for l in range(4, 0, -1):
        inp = refined[l - 1] if l == 4 else concat([refined[l - 1], out], axis=-1)
        out = selu(
            deconv2d(inp, weights[f"dec{l}.W"], weights[f"dec{l}.b"], specs[l].stride, (sizes[l - 1], sizes[l - 1]))
        )
    return out


def forward(weights: Mapping[str, Tensor], x, arch: Architecture, ablation: str = "full", chi: float = 5.0):
    """Reconstruct the last tensor of each sequence in ``x`` ``(B, h, n, n, s)``.

    Returns ``(reconstruction, attention_weights)`` where the weights map
    level -> ``(B, h)`` array (levels using attention only).
    """
    xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xv.ndim != 5 or xv.shape[2] != arch.n or xv.shape[3] != arch.n or xv.shape[4] != arch.s:
        raise ConfigError(f"input shape {xv.shape} does not match (B, h, {arch.n}, {arch.n}, {arch.s})")
    B, h = xv.shape[:2]
    recurrent, use_attention = ABLATIONS[ablation]
    flat = ad.reshape(ad.constant(x), (B * h,) + xv.shape[2:])
    maps = [ad.reshape(m, (B, h) + m.shape[1:]) for m in encode(flat, weights, arch)]

    refined, alphas = [], {}
    for l in range(1, 5):
        seq = maps[l - 1]
        if l not in recurrent:
            refined.append(seq[:, h - 1])
            continue
        kernels = ConvLSTMKernels(weights, l)
        state_shape = (B,) + seq.shape[2:]
        hid = cell = Tensor(np.zeros(state_shape), requires_grad=False)
        hiddens = []
        for t in range(h):
            hid, cell = convlstm_step(seq[:, t], hid, cell, kernels)
            hiddens.append(hid)
        if use_attention:
            ref, alpha = attention(hiddens, chi)
            alphas[l] = alpha.value
            refined.append(ref)
        else:
            refined.append(hiddens[-1])
    return decode(refined, weights, arch), alphas


def reconstruction_loss(target, recon: Tensor) -> Tensor:
    """Sum over samples and channels of squared Frobenius residuals."""
    diff = recon - ad.constant(target)
    return ad.sum_(diff * diff)


def loss_value(target: np.ndarray, recon: np.ndarray) -> float:
    return float(np.sum((np.asarray(target) - np.asarray(recon)) ** 2))


def constant_weights(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=False) for k, v in params.arrays.items()}


def trainable_weights(params: ModelParams) -> dict[str, Tensor]:
    """Tensors aliasing ``params.arrays``; in-place updates show through."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.arrays.items()}


def reconstruct(params: ModelParams, data, batch_size: int = 32, return_attention: bool = False):
    """Inference over a :class:`SequenceDataset` or an array ``(B, h, n, n, s)``."""
    weights = constant_weights(params)
    if isinstance(data, SequenceDataset):
        total = len(data)
        get = data.batch
    else:
        arr = np.asarray(data, dtype=np.float64)
        total = arr.shape[0]
        get = lambda idx: arr[idx]
    outs, alphas = [], []
    for lo in range(0, total, batch_size):
        idx = np.arange(lo, min(total, lo + batch_size))
        recon, alpha = forward(weights, get(idx), params.arch, params.ablation, params.chi)
        outs.append(recon.value)
        alphas.append(alpha)
    shape = (0, params.arch.n, params.arch.n, params.arch.s)
    recon = np.concatenate(outs) if outs else np.zeros(shape)
    if return_attention:
        merged = {l: np.concatenate([a[l] for a in alphas]) for l in (alphas[0] if alphas else {})}
        return recon, merged
    return recon


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    h: int = 5
    chi: float = 5.0
    ablation: str = "full"
    seed: int = 0
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_train_anchors: int | None = None

    def validate(self) -> None:
        if self.h < 1 or self.chi <= 0:
            raise ConfigError("need h >= 1 and chi > 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    initial_loss: float
    best_epoch: int

    def write_log(self, path) -> None:
        lines = ["epoch,train_loss,valid_loss,wall_seconds"]
        lines += [f"{e.epoch},{float(e.train_loss)!r},{float(e.valid_loss)!r},{e.wall_seconds:.3f}" for e in self.history]
        atomic_write_text(path, "\n".join(lines) + "\n")


def mean_loss(params: ModelParams, data: SequenceDataset, batch_size: int = 32) -> float:
    """Eq.-6 loss per sequence averaged over the dataset."""
    if len(data) == 0:
        return float("nan")
    recon = reconstruct(params, data, batch_size)
    return loss_value(data.targets(), recon) / len(data)


def fit(
    params: ModelParams,
    train: SequenceDataset,
    valid: SequenceDataset | None,
    cfg: TrainConfig,
    progress: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Adam on mini-batches of sequences; keeps the parameters with the best valid loss.

    Losses in the log are per sequence (Eq. 6 summed over one sequence's
    target tensor). Early stopping triggers after ``patience`` epochs
    without valid-loss improvement.
    """
    cfg.validate()
    if len(train) == 0:
        raise ConfigError("no training anchors")
    params = params.copy()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    weights = trainable_weights(params)
    state = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    initial = mean_loss(params, train, cfg.batch_size)
    history = []
    best, best_epoch, best_arrays, stale = math.inf, 0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train))
        if cfg.max_train_anchors is not None:
            order = order[: cfg.max_train_anchors]
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[lo : lo + cfg.batch_size])
            recon, _ = forward(weights, train.batch(idx), params.arch, params.ablation, params.chi)
            loss = reconstruction_loss(train.targets(idx), recon)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            ad.backward(loss, weights.values())
            ad.adam_step(params.arrays, {k: w.grad for k, w in weights.items()}, state)
            total += value
        train_loss = total / len(order)
        valid_loss = mean_loss(params, valid, cfg.batch_size) if valid is not None and len(valid) else train_loss
        entry = EpochLog(epoch, train_loss, valid_loss, time.perf_counter() - start)
        history.append(entry)
        log.info("epoch %d train %.6g valid %.6g (%.1fs)", epoch, train_loss, valid_loss, entry.wall_seconds)
        if progress is not None:
            progress(entry)
        if valid_loss < best:
            best, best_epoch, stale = valid_loss, epoch, 0
            best_arrays = {k: v.copy() for k, v in params.arrays.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_arrays is not None:
        for k, v in best_arrays.items():
            params.arrays[k][...] = v
    return TrainResult(params, history, initial, best_epoch)


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   magic b"MSCR", version u32, config hash (32 raw sha256 bytes),
#   config JSON (u32 length + utf-8),
#   n u32, mean n*f64, std n*f64,
#   array count u32, then per array: name (u32 length + utf-8), ndim u32,
#   dims ndim*u32, data f64 row-major
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MSCR"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = json.dumps(params.config(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), bytes.fromhex(params.config_hash())]
    parts += [struct.pack("<I", len(cfg)), cfg]
    n = params.arch.n
    parts += [struct.pack("<I", n), np.asarray(params.mean, "<f8").tobytes(), np.asarray(params.std, "<f8").tobytes()]
    parts.append(struct.pack("<I", len(params.arrays)))
    for name in sorted(params.arrays):
        arr = params.arrays[name]
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save(params: ModelParams, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load(path, expected_config: dict | None = None) -> ModelParams:
    """Read a checkpoint; ``expected_config`` (as from ``ModelParams.config``) must hash equal."""
    raw = Path(path).read_bytes()
    try:
        return _parse_checkpoint(raw, path, expected_config)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, (IncompatibleCheckpointError, ShapeError)):
            raise
        raise IncompatibleCheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(raw: bytes, path, expected_config) -> ModelParams:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    stored_hash = raw[8:40].hex()
    off = 40
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = json.loads(raw[off : off + clen].decode())
    off += clen
    if config_hash(cfg) != stored_hash:
        raise IncompatibleCheckpointError(f"{path}: config hash does not match stored config")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint config {cfg} incompatible with expected {expected_config}"
        )
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    mean = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
    off += 8 * n
    std = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
    off += 8 * n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, "<f8", size, off).astype(np.float64).reshape(shape)
        off += 8 * size
    return ModelParams(
        Architecture.from_dict(cfg["arch"]),
        arrays,
        cfg["ablation"],
        cfg["h"],
        cfg["chi"],
        tuple(cfg["scales"]),
        cfg["gap"],
        mean,
        std,
    )
