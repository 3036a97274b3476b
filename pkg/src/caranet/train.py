"""Deep-supervised training: boundary-weighted IoU + BCE objective over the
global map and the three side outputs, Adam updates, the multi-scale step,
and a bit-exact binary checkpoint format.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import resize_batch
from .model import CaraNet, CaraNetConfig, PredictionSet
from .tensor import NumericalError, Parameter, Tensor

__all__ = [
    "TrainConfig",
    "Adam",
    "weight_map",
    "weighted_bce",
    "weighted_iou",
    "total_loss",
    "scaled_extent",
    "multiscale_step",
    "train_model",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 20
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.scales:
            raise ValueError("scales must be nonempty")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be >= 1")


class Adam:
    """Bias-corrected Adam. Moments are float32 mirrors of the parameters;
    the update arithmetic runs in float64."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {p.name: np.zeros(p.value.shape, dtype=np.float32) for p in self.params}
        self.v = {p.name: np.zeros(p.value.shape, dtype=np.float32) for p in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.value.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalError(f"NaN/Inf gradient for parameter {p.name!r}")
            g64 = g.astype(np.float64)
            m = self.beta1 * self.m[p.name].astype(np.float64) + (1.0 - self.beta1) * g64
            v = self.beta2 * self.v[p.name].astype(np.float64) + (1.0 - self.beta2) * g64 * g64
            self.m[p.name] = m.astype(np.float32)
            self.v[p.name] = v.astype(np.float32)
            update = (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
            p.value.data -= update

    def zero_grad(self) -> None:
        for p in self.params:
            p.value.zero_grad()


# ---------------------------------------------------------------------------
# losses


def _box_sum(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Separable k x k stride-1 box sum with zero padding, via summed columns;
    exact for binary inputs (integer sums in float64)."""
    h, w = x.shape[-2], x.shape[-1]
    xp = np.pad(x.astype(np.float64), [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
    cs = np.cumsum(xp, axis=-2)
    cs = np.concatenate([np.zeros_like(cs[..., :1, :]), cs], axis=-2)
    rows = cs[..., k:, :] - cs[..., :-k, :]
    cs = np.cumsum(rows, axis=-1)
    cs = np.concatenate([np.zeros_like(cs[..., :, :1]), cs], axis=-1)
    out = cs[..., :, k:] - cs[..., :, :-k]
    return out[..., :h, :w]


def weight_map(g: np.ndarray) -> np.ndarray:
    """Boundary-emphasis weights 1 + 5*|avg_pool31(G) - G| in [1, 6].

    G must be binary; the 31x31 stride-1 pool pads with zeros and divides by
    the full window, so borders of all-foreground masks also get weight > 1.
    """
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("weight_map: mask must be binary {0,1}")
    pooled = _box_sum(g, 31, 15) / (31.0 * 31.0)
    return 1.0 + 5.0 * np.abs(pooled - g)


def weighted_bce(logits: Tensor, g: np.ndarray, w: np.ndarray) -> Tensor:
    """Weighted binary cross-entropy from logits, softplus-stable."""
    if logits.shape != g.shape or logits.shape != w.shape:
        raise ValueError("weighted_bce: shape mismatch")
    gt = Tensor(g, dtype=logits.dtype)
    wt = Tensor(w, dtype=logits.dtype)
    per_pixel = T.sub(T.softplus(logits), T.mul(logits, gt))
    return T.scale(T.tsum(T.mul(wt, per_pixel)), 1.0 / float(w.sum(dtype=np.float64)))


def weighted_iou(logits: Tensor, g: np.ndarray, w: np.ndarray) -> Tensor:
    """1 - weighted soft intersection over union, in [0, 1]."""
    if logits.shape != g.shape or logits.shape != w.shape:
        raise ValueError("weighted_iou: shape mismatch")
    gt = Tensor(g, dtype=logits.dtype)
    wt = Tensor(w, dtype=logits.dtype)
    p = T.sigmoid(logits)
    pg = T.mul(p, gt)
    inter = T.tsum(T.mul(wt, pg))
    union = T.tsum(T.mul(wt, T.sub(T.add(p, gt), pg)))
    return 1.0 - T.mul(inter, T.reciprocal(union))


def _map_loss(logits: Tensor, g: np.ndarray, w: np.ndarray) -> Tensor:
    return T.add(weighted_iou(logits, g, w), weighted_bce(logits, g, w))


def total_loss(preds: PredictionSet, g: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Sum of the per-map losses for S_g and S_3..S_5, each upsampled to the
    ground-truth extent first. Returns the scalar plus per-map values."""
    if g.ndim != 4 or g.shape[1] != 1:
        raise ValueError("total_loss: ground truth must be Nx1xHxW")
    h, w_ext = g.shape[2], g.shape[3]
    wmap = weight_map(g)
    total = None
    parts: dict[str, float] = {}
    for name, m in (("s_g", preds.s_g), ("s3", preds.s3), ("s4", preds.s4), ("s5", preds.s5)):
        up = m if m.shape[2:] == (h, w_ext) else T.bilinear_upsample(m, size=(h, w_ext))
        term = _map_loss(up, g, wmap)
        parts[name] = float(term.data)
        total = term if total is None else T.add(total, term)
    return total, parts


# ---------------------------------------------------------------------------
# optimization steps


def scaled_extent(base: int, factor: float) -> int:
    """Rescaled extent rounded to the nearest multiple of 32 (ties up)."""
    return max(32, int(base * factor / 32.0 + 0.5) * 32)


def multiscale_step(model: CaraNet, opt: Adam, images: np.ndarray, masks: np.ndarray,
                    scales) -> list[float]:
    """One optimizer step per scale: resize the batch (masks re-binarized at
    0.5), run forward/backward and update. Returns the per-scale losses."""
    h, w = images.shape[2], images.shape[3]
    losses = []
    for s in scales:
        th, tw = scaled_extent(h, s), scaled_extent(w, s)
        img = resize_batch(images, (th, tw))
        msk = (resize_batch(masks, (th, tw)) >= 0.5).astype(np.float32)
        preds = model.forward(Tensor(img))
        loss, _ = total_loss(preds, msk)
        model.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses


def train_model(model: CaraNet, opt: Adam, images: np.ndarray, masks: np.ndarray,
                cfg: TrainConfig, log_rows: list | None = None,
                checkpoint_fn=None) -> list[float]:
    """Epoch loop over seeded shuffles of the training arrays.

    images: Nx3xHxW float32, masks: Nx1xHxW binary float32. Appends
    (epoch, step, scale, loss) tuples to log_rows and calls
    checkpoint_fn(epoch) after every cfg.checkpoint_every epochs.
    Returns per-epoch mean losses.
    """
    n = images.shape[0]
    rng = np.random.default_rng(cfg.seed)
    epoch_means = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            losses = multiscale_step(model, opt, images[idx], masks[idx], cfg.scales)
            epoch_losses.extend(losses)
            if log_rows is not None:
                for sc, lv in zip(cfg.scales, losses):
                    log_rows.append((epoch, step, sc, lv))
        epoch_means.append(float(np.mean(epoch_losses)))
        if checkpoint_fn is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(epoch)
    return epoch_means


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


_MAGIC = b"CARA"
_VERSION = 1


def _write_entry(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def _read_entry(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def save_checkpoint(model: CaraNet, opt: Adam | None, path) -> None:
    """Little-endian container: magic, version, step counter, embedded model
    config, then (name, rank, extents, float32 payload) entries. Adam moments
    live under "<name>.m" / "<name>.v"."""
    cfg = model.cfg
    cfg_blob = json.dumps({
        "input_size": list(cfg.input_size),
        "base_channels": cfg.base_channels,
        "decoder_channels": cfg.decoder_channels,
        "cfp_channels": cfg.cfp_channels,
        "cfp_rate": cfg.cfp_rate,
        "use_cfp": cfg.use_cfp,
        "use_ara": cfg.use_ara,
        "seed": cfg.seed,
    }, sort_keys=True).encode("utf-8")
    params = model.parameters()
    entries = len(params) + (2 * len(params) if opt is not None else 0)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<Q", opt.t if opt is not None else 0))
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", entries))
    for p in params:
        _write_entry(buf, p.name, p.value.data)
        if opt is not None:
            _write_entry(buf, p.name + ".m", opt.m[p.name])
            _write_entry(buf, p.name + ".v", opt.v[p.name])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, model: CaraNet | None = None,
                    train_cfg: TrainConfig | None = None) -> tuple[CaraNet, Adam]:
    """Rebuild (model, optimizer) from a checkpoint; bit-exact round trip.

    When a model is supplied its parameter names must match the file exactly
    (unknown or missing names are errors); otherwise the embedded config is
    used to construct one.
    """
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (t,) = struct.unpack("<Q", _read_exact(f, 8))
        (clen,) = struct.unpack("<I", _read_exact(f, 4))
        cfg_raw = json.loads(_read_exact(f, clen).decode("utf-8"))
        (entries,) = struct.unpack("<I", _read_exact(f, 4))
        data = {}
        for _ in range(entries):
            name, arr = _read_entry(f)
            if name in data:
                raise CheckpointError(f"duplicate entry {name!r}")
            data[name] = arr
        if f.read(1):
            raise CheckpointError("trailing bytes after last entry")

    if model is None:
        cfg_raw["input_size"] = tuple(cfg_raw["input_size"])
        model = CaraNet(CaraNetConfig(**cfg_raw))
    tc = train_cfg or TrainConfig()
    opt = Adam(model.parameters(), lr=tc.learning_rate, beta1=tc.adam_beta1,
               beta2=tc.adam_beta2, eps=tc.adam_eps)
    opt.t = t
    has_moments = any(k.endswith(".m") for k in data)
    for name in data:
        base = name[:-2] if name.endswith((".m", ".v")) else name
        if base not in model.store.params:
            raise CheckpointError(f"unknown parameter name {name!r} in checkpoint")
    for p in model.parameters():
        if p.name not in data:
            raise CheckpointError(f"checkpoint is missing parameter {p.name!r}")
        if data[p.name].shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: file {data[p.name].shape}, model {p.value.shape}")
        p.value = Tensor(data[p.name], requires_grad=True)
        if has_moments:
            for suffix, store in ((".m", opt.m), (".v", opt.v)):
                key = p.name + suffix
                if key not in data:
                    raise CheckpointError(f"checkpoint is missing moment {key!r}")
                if data[key].shape != p.value.shape:
                    raise CheckpointError(f"shape mismatch for moment {key!r}")
                store[p.name] = data[key]
    return model, opt
