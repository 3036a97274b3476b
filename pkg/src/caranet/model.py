"""The segmentation network: multi-level encoder with channel-split residual
blocks, a partial decoder over the three deepest features producing a coarse
global logit map, channel-wise dilated feature pyramids, and axial
reverse-attention refinement stages emitting deep side outputs.

Feature level i lives at resolution (h / 2^(i-1), w / 2^(i-1)); the global
map sits at 1/4 scale and the stage outputs at the scale of the feature they
refine. Stage logits are residual refinements of the resized previous map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = [
    "CaraNetConfig",
    "EncoderFeatures",
    "PredictionSet",
    "CaraNet",
    "ParamStore",
    "Conv2d",
    "CFPBlock",
    "AxialAttention",
    "ARAStage",
    "PartialDecoder",
    "reverse_map",
    "cfp_dilation_rates",
    "receptive_field_probe",
    "ProbeResult",
]


@dataclass(frozen=True)
class CaraNetConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 4
    decoder_channels: int = 8
    cfp_channels: int = 4          # number of parallel pyramid channels K
    cfp_rate: int = 8              # dilation knob d; per-channel rates derive from it
    use_cfp: bool = True
    use_ara: bool = True
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError("base_channels must be a positive multiple of 4")
        if self.decoder_channels < 1:
            raise ValueError("decoder_channels must be >= 1")
        if self.cfp_channels < 1:
            raise ValueError("cfp_channels must be >= 1")
        if self.cfp_rate < 0:
            raise ValueError("cfp_rate must be >= 0")
        for c in self.encoder_channels()[2:]:
            if c % self.cfp_channels:
                raise ValueError(f"cfp_channels={self.cfp_channels} must divide feature width {c}")

    def encoder_channels(self) -> list[int]:
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 8 * b]


@dataclass
class EncoderFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4, self.f5]


@dataclass
class PredictionSet:
    """Global map plus the three stage logits, and the full-size final map."""
    s_g: Tensor
    s5: Tensor
    s4: Tensor
    s3: Tensor
    final: Tensor

    def side_outputs(self) -> list[Tensor]:
        return [self.s_g, self.s3, self.s4, self.s5]


def cfp_dilation_rates(d: int, k: int = 4) -> list[int]:
    """Per-channel dilation rates derived from the single knob d.

    d=8 yields {1, 2, 4, 8}; entries that would fall below 1 (including the
    d=0 setting) are clamped to 1, i.e. a standard convolution.
    """
    return [max(1, d // (2 ** (k - 1 - i))) for i in range(k)]


class ParamStore:
    """Registry of uniquely named parameters with the seeded initializer."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, array: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(array.astype(np.float32)))
        self.params[name] = p
        return p

    def conv_weight(self, name: str, shape: tuple[int, ...]) -> Parameter:
        # ReLU-gain uniform fan-in scaling; smaller bounds make activations
        # vanish across the five encoder levels
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k,
                 stride=1, padding=0, dilation=1, zero_init=False):
        # zero_init is used by the logit heads so stages start as identity
        # refinements; attention/product paths would otherwise saturate
        kh, kw = (k, k) if isinstance(k, int) else k
        if zero_init:
            self.w = store.add(f"{name}.w", np.zeros((cout, cin, kh, kw)))
        else:
            self.w = store.conv_weight(f"{name}.w", (cout, cin, kh, kw))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w.value, self.b.value,
                        stride=self.stride, padding=self.padding, dilation=self.dilation)


class Res2NetUnit:
    """Split channels into four groups, chain 3x3 convs through the groups,
    merge with a 1x1 and add the input back."""

    GROUPS = 4

    def __init__(self, store: ParamStore, name: str, channels: int):
        if channels % self.GROUPS:
            raise ValueError(f"{name}: channels {channels} not divisible by {self.GROUPS}")
        g = channels // self.GROUPS
        self.group_width = g
        self.convs = [Conv2d(store, f"{name}.g{i}", g, g, 3, padding=1)
                      for i in range(1, self.GROUPS)]
        self.merge = Conv2d(store, f"{name}.merge", channels, channels, 1)

    def __call__(self, x: Tensor) -> Tensor:
        g = self.group_width
        parts = [T.narrow(x, 1, i * g, g) for i in range(self.GROUPS)]
        ys = [parts[0]]
        for i, conv in enumerate(self.convs):
            ys.append(T.relu(conv(T.add(parts[i + 1], ys[-1]))))
        return T.relu(T.add(self.merge(T.concat(ys, 1)), x))


class Encoder:
    """Five levels; level i halves the previous resolution for i >= 2."""

    def __init__(self, store: ParamStore, base_channels: int):
        chans = [base_channels, 2 * base_channels, 4 * base_channels,
                 8 * base_channels, 8 * base_channels]
        self.stem = Conv2d(store, "enc.l1.conv", 3, chans[0], 3, padding=1)
        self.units = [Res2NetUnit(store, "enc.l1.unit", chans[0])]
        self.downs = []
        for i in range(1, 5):
            self.downs.append(Conv2d(store, f"enc.l{i + 1}.down", chans[i - 1], chans[i],
                                     3, stride=2, padding=1))
            self.units.append(Res2NetUnit(store, f"enc.l{i + 1}.unit", chans[i]))
        self.channels = chans

    def __call__(self, image: Tensor) -> EncoderFeatures:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError("encoder expects an Nx3xHxW image")
        h, w = image.shape[2], image.shape[3]
        if h % 16 or w % 16:
            raise ValueError(f"input extents must be divisible by 16, got {h}x{w}")
        feats = []
        x = self.units[0](T.relu(self.stem(image)))
        feats.append(x)
        for down, unit in zip(self.downs, self.units[1:]):
            x = unit(T.relu(down(x)))
            feats.append(x)
        return EncoderFeatures(*feats)


class PartialDecoder:
    """Fuse the three deepest features into a one-channel global logit map.

    Deeper maps are upsampled x2 stepwise, gated into shallower branches by
    element-wise products, then concatenated and convolved down to the head.
    """

    def __init__(self, store: ParamStore, c3: int, c4: int, c5: int, d: int):
        self.b3 = Conv2d(store, "pd.b3", c3, d, 1)
        self.b4 = Conv2d(store, "pd.b4", c4, d, 1)
        self.b5 = Conv2d(store, "pd.b5", c5, d, 1)
        self.fuse4 = Conv2d(store, "pd.fuse4", 2 * d, d, 3, padding=1)
        self.fuse3 = Conv2d(store, "pd.fuse3", 2 * d, d, 3, padding=1)
        self.head = Conv2d(store, "pd.head", d, 1, 1, zero_init=True)

    def __call__(self, f3: Tensor, f4: Tensor, f5: Tensor) -> Tensor:
        h3, h4, h5 = f3.shape[2], f4.shape[2], f5.shape[2]
        w3, w4, w5 = f3.shape[3], f4.shape[3], f5.shape[3]
        if not (h3 == 2 * h4 == 4 * h5 and w3 == 2 * w4 == 4 * w5):
            raise ValueError(f"partial decoder needs extents in ratio 4:2:1, "
                             f"got {h3}x{w3}, {h4}x{w4}, {h5}x{w5}")
        b3, b4, b5 = self.b3(f3), self.b4(f4), self.b5(f5)
        up5 = T.bilinear_upsample(b5, factor=2)
        m4 = T.mul(b4, up5)
        m3 = T.mul(T.mul(b3, T.bilinear_upsample(b4, factor=2)),
                   T.bilinear_upsample(b5, factor=4))
        t4 = T.relu(self.fuse4(T.concat([m4, up5], 1)))
        t3 = T.relu(self.fuse3(T.concat([m3, T.bilinear_upsample(t4, factor=2)], 1)))
        return self.head(t3)


class CFPBlock:
    """Channel-split feature pyramid with hierarchical fusion.

    The input is projected, split into K parallel channels of width M/K, and
    each channel runs three successive 3x3 convolutions at its own dilation
    rate with the intermediate outputs skip-summed. Channel outputs are
    accumulated into running levels (level_i = level_(i-1) + out_i), the
    levels are concatenated back to M channels, projected by a 1x1 and added
    residually to the input. Output shape equals input shape.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, rate: int, k: int = 4):
        if channels % k:
            raise ValueError(f"{name}: channels {channels} not divisible by K={k}")
        m = channels // k
        self.k = k
        self.group_width = m
        self.rates = cfp_dilation_rates(rate, k)
        self.proj_in = Conv2d(store, f"{name}.in", channels, channels, 1)
        self.branches = []
        for i, r in enumerate(self.rates):
            convs = [Conv2d(store, f"{name}.c{i}.s{j}", m, m, 3, padding=r, dilation=r)
                     for j in range(3)]
            self.branches.append(convs)
        self.proj_out = Conv2d(store, f"{name}.out", channels, channels, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.proj_in(x)
        m = self.group_width
        outs = []
        for i, convs in enumerate(self.branches):
            part = T.narrow(h, 1, i * m, m)
            t1 = convs[0](part)
            t2 = convs[1](t1)
            t3 = convs[2](t2)
            outs.append(T.add(T.add(t1, t2), t3))
        levels = [outs[0]]
        for o in outs[1:]:
            levels.append(T.add(levels[-1], o))
        return T.add(self.proj_out(T.concat(levels, 1)), x)


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-sample RMS normalization over (C, H, W); keeps samples independent."""
    n, c, h, w = x.shape
    ms = T.tmean(T.reshape(T.mul(x, x), (n, c * h * w)), axis=1)
    inv = T.reciprocal(T.sqrt(T.add_const(ms, eps)))
    inv = T.reshape(inv, (n, 1, 1, 1))
    for axis, extent in ((1, c), (2, h), (3, w)):
        inv = T.expand_axis(inv, axis, extent)
    return T.mul(x, inv)


class AxialAttention:
    """Attention factorized into a height pass feeding a width pass.

    Per axis, the input is RMS-normalized (unnormalized feature magnitudes
    saturate the gate), Q/K/V come from 1x1 convolutions, and the attention
    weights are sigmoid(QK^T / sqrt(C)) (rows need not sum to one) applied
    to V.
    """

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.channels = channels
        self.qkv = {}
        for axis in ("h", "w"):
            self.qkv[axis] = tuple(Conv2d(store, f"{name}.{axis}.{t}", channels, channels, 1)
                                   for t in ("q", "k", "v"))

    def attend(self, x: Tensor, axis: str) -> Tensor:
        n, c, h, w = x.shape
        xn = rms_normalize(x)
        cq, ck, cv = self.qkv[axis]
        q, k, v = cq(xn), ck(xn), cv(xn)
        if axis == "h":
            fwd, back, batch, seq = (0, 3, 2, 1), (0, 3, 2, 1), n * w, h
        else:
            fwd, back, batch, seq = (0, 2, 3, 1), (0, 3, 1, 2), n * h, w
        q = T.reshape(T.permute(q, fwd), (batch, seq, c))
        k = T.reshape(T.permute(k, fwd), (batch, seq, c))
        v = T.reshape(T.permute(v, fwd), (batch, seq, c))
        weights = T.sigmoid(T.scale(T.matmul(q, T.permute(k, (0, 2, 1))), 1.0 / math.sqrt(c)))
        out = T.matmul(weights, v)
        if axis == "h":
            out = T.permute(T.reshape(out, (n, w, h, c)), back)
        else:
            out = T.permute(T.reshape(out, (n, h, w, c)), back)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.attend(self.attend(x, "h"), "w")


def reverse_map(s: Tensor) -> Tensor:
    """1 - sigmoid(logits): attention mass on not-yet-segmented regions."""
    return 1.0 - T.sigmoid(s)


def _resize_logits(s: Tensor, extent: tuple[int, int]) -> Tensor:
    """Match a one-channel logit map to a feature extent: bilinear when
    enlarging, average-pool when shrinking (integer ratios only)."""
    h, w = s.shape[2], s.shape[3]
    th, tw = extent
    if (h, w) == (th, tw):
        return s
    if th >= h and tw >= w:
        return T.bilinear_upsample(s, size=(th, tw))
    if h % th or w % tw:
        raise ValueError(f"cannot pool {h}x{w} logits to {th}x{tw}")
    return T.avg_pool2d(s, (h // th, w // tw))


class ARAStage:
    """One axial-attention + reverse-attention refinement stage."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.channels = channels
        self.att = AxialAttention(store, f"{name}.att", channels)
        self.head = Conv2d(store, f"{name}.head", channels, 1, 1, zero_init=True)

    def __call__(self, feat: Tensor, s_prev: Tensor) -> tuple[Tensor, Tensor]:
        sp = _resize_logits(s_prev, (feat.shape[2], feat.shape[3]))
        aa = self.att(feat)
        r = reverse_map(sp)
        ara = T.mul(aa, T.expand_axis(r, 1, self.channels))
        return ara, T.add(self.head(ara), sp)


class PlainStage:
    """Ablation stage: a bare conv head on the features, added to the
    resized previous map."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.head = Conv2d(store, f"{name}.head", channels, 1, 1, zero_init=True)

    def __call__(self, feat: Tensor, s_prev: Tensor) -> tuple[Tensor, Tensor]:
        sp = _resize_logits(s_prev, (feat.shape[2], feat.shape[3]))
        return feat, T.add(self.head(feat), sp)


class CaraNet:
    """Encoder -> partial decoder -> three refinement stages, deepest first."""

    def __init__(self, cfg: CaraNetConfig):
        self.cfg = cfg
        store = ParamStore(cfg.seed)
        self.store = store
        self.encoder = Encoder(store, cfg.base_channels)
        c = self.encoder.channels
        self.pd = PartialDecoder(store, c[2], c[3], c[4], cfg.decoder_channels)
        self.context = {}
        self.stages = {}
        for lvl in (5, 4, 3):
            ch = c[lvl - 1]
            if cfg.use_cfp:
                self.context[lvl] = CFPBlock(store, f"cfp{lvl}", ch, cfg.cfp_rate, cfg.cfp_channels)
            else:
                self.context[lvl] = Conv2d(store, f"proj{lvl}", ch, ch, 1)
            if cfg.use_ara:
                self.stages[lvl] = ARAStage(store, f"stage{lvl}", ch)
            else:
                self.stages[lvl] = PlainStage(store, f"stage{lvl}", ch)

    # -- parameter plumbing -------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self.store.params.values())

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.store.params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.value.zero_grad()

    def to_dtype(self, dtype) -> "CaraNet":
        """Cast all parameters in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.value = Tensor(p.value.data.astype(dtype), requires_grad=True)
        return self

    # -- forward ------------------------------------------------------------
    def forward(self, image: Tensor) -> PredictionSet:
        feats = self.encoder(image)
        s_g = self.pd(feats.f3, feats.f4, feats.f5)
        prev = s_g
        side = {}
        for lvl, feat in ((5, feats.f5), (4, feats.f4), (3, feats.f3)):
            ctx = self.context[lvl](feat)
            _, s = self.stages[lvl](ctx, prev)
            side[lvl] = s
            prev = s
        final = T.bilinear_upsample(side[3], size=(image.shape[2], image.shape[3]))
        return PredictionSet(s_g=s_g, s5=side[5], s4=side[4], s3=side[3], final=final)

    def __call__(self, image: Tensor) -> PredictionSet:
        return self.forward(image)


@dataclass(frozen=True)
class ProbeResult:
    height: int
    width: int
    truncated: bool

    def as_tuple(self) -> tuple[int, int]:
        return (self.height, self.width)


def receptive_field_probe(block, in_channels: int, extent: int,
                          seed: int = 0, threshold: float = 1e-9) -> ProbeResult:
    """Measure a block's realized footprint by one backward pass.

    Runs the block on a random field, backpropagates from the centre output
    unit (summed over channels) and returns the bounding box of input
    positions whose gradient magnitude exceeds the threshold. A box touching
    the field border is flagged as truncated.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1.0, 1.0, size=(1, in_channels, extent, extent)),
               requires_grad=True, dtype=np.float64)
    y = block(x)
    hc, wc = y.shape[2] // 2, y.shape[3] // 2
    mask = np.zeros(y.shape)
    mask[:, :, hc, wc] = 1.0
    T.tsum(T.mul(y, Tensor(mask, dtype=np.float64))).backward()
    g = np.abs(x.grad).max(axis=(0, 1))
    rows = np.flatnonzero(g.max(axis=1) > threshold)
    cols = np.flatnonzero(g.max(axis=0) > threshold)
    if rows.size == 0 or cols.size == 0:
        return ProbeResult(0, 0, False)
    truncated = bool(rows[0] == 0 or cols[0] == 0
                     or rows[-1] == extent - 1 or cols[-1] == extent - 1)
    return ProbeResult(int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1), truncated)
