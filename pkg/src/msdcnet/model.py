"""Multi-scale dense 2D feature fusion, concatenation cost volume,
multi-scale residual 3D matching, scale recovery and soft-argmin readout.

The network is described by a flat *layer plan* (one ``LayerSpec`` per
learnable layer) so that parameter allocation, counting and the ``info``
listing all come from a single source.  The forward functions look layers
up by name.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .ops import (RunningStats, batch_norm, concat, convolve, relu, resize_bilinear,
                  split, transposed_convolve)
from .tensor import Parameter, Tensor, make_node

VARIANTS = ("full", "single_scale_2d", "single_scale_3d", "single_scale_both")
VARIANT_ALIASES = {"2d": "single_scale_2d", "3d": "single_scale_3d", "both": "single_scale_both"}


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    max_disparity: int = 192
    dense_block_depth: int = 4
    dense_groups: int = 4
    fusion_channels: int | None = None  # defaults to 4 * base_channels (128 at F=32)
    growth_rate: int | None = None  # defaults to base_channels // 2
    levels_3d: int = 4
    residual_pairs: int = 1
    variant: str = "full"
    zero_init_residual: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        variant = VARIANT_ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.max_disparity < 4 or self.max_disparity % 4:
            raise ValueError(f"max_disparity must be a positive multiple of 4, got {self.max_disparity}")
        if self.levels_3d < 1:
            raise ValueError("levels_3d must be at least 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def fusion(self):
        return self.fusion_channels or 4 * self.base_channels

    @property
    def growth(self):
        return self.growth_rate or max(self.base_channels // 2, 1)

    @property
    def multiscale_2d(self):
        return self.variant in ("full", "single_scale_3d")

    @property
    def multiscale_3d(self):
        return self.variant in ("full", "single_scale_2d")

    def spatial_divisor(self):
        """Image height/width must be divisible by this."""
        div = 8 if self.multiscale_2d else 4
        if self.multiscale_3d:
            div = max(div, 4 * 2 ** (self.levels_3d - 1))
        return div

    def disparity_divisor(self):
        return 4 * 2 ** (self.levels_3d - 1) if self.multiscale_3d else 4

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class LayerSpec:
    name: str
    rank: int  # spatial rank, 2 or 3
    cin: int
    cout: int
    k: int
    stride: int = 1
    pad: int = 0
    transposed: bool = False
    bn: bool = True
    relu: bool = True

    @property
    def bias(self):
        return not self.bn

    def kernel_shape(self):
        lead = (self.cin, self.cout) if self.transposed else (self.cout, self.cin)
        return lead + (self.k,) * self.rank

    def param_count(self):
        n = self.cin * self.cout * self.k ** self.rank
        if self.bias:
            n += self.cout
        if self.bn:
            n += 2 * self.cout
        return n

    def describe(self):
        kind = f"{'deconv' if self.transposed else 'conv'}{self.rank}d"
        tail = "+bn" if self.bn else "+bias"
        tail += "+relu" if self.relu else ""
        return (f"{self.name:<28} {kind:<9} {self.cin:>4} -> {self.cout:<4} "
                f"k={self.k} s={self.stride} p={self.pad} {tail}")


# ---------------------------------------------------------------- layer plan

def _conv2d(name, cin, cout, k, stride=1, bn=True, act=True):
    return LayerSpec(name, 2, cin, cout, k, stride, k // 2, bn=bn, relu=act)


def _conv3d(name, cin, cout, stride=1, bn=True, act=True):
    return LayerSpec(name, 3, cin, cout, 3, stride, 1, bn=bn, relu=act)


def _deconv3d(name, cin, cout, bn=True, act=True):
    return LayerSpec(name, 3, cin, cout, 3, 2, 1, transposed=True, bn=bn, relu=act)


def _dense_block_plan(prefix, width, cfg):
    plan = []
    g = cfg.growth
    for j in range(cfg.dense_groups):
        for i in range(cfg.dense_block_depth):
            plan.append(_conv2d(f"{prefix}.g{j}.l{i}", width + i * g, g, 3))
        plan.append(_conv2d(f"{prefix}.g{j}.trans", width + cfg.dense_block_depth * g, width, 1))
    return plan


def _pyramid_levels(cfg):
    return 3 if cfg.multiscale_2d else 1


def _channels_3d(cfg, level):
    return cfg.base_channels * 2 ** level


def _single_scale_pairs(cfg):
    # matches the conv depth of the encoder-decoder it replaces
    return max((cfg.levels_3d - 1) * (cfg.residual_pairs + 1), 1)


def layer_plan(cfg: ModelConfig):
    F = cfg.base_channels
    plan = []
    # different-scale feature extraction
    for s in range(1, _pyramid_levels(cfg) + 1):
        plan.append(_conv2d(f"dsfe.s{s}.down", 3 if s == 1 else F, F, 5, stride=2))
        plan += _dense_block_plan(f"dsfe.s{s}.dense", F, cfg)
    # multi-scale feature fusion
    plan.append(_conv2d("msff.down", F * _pyramid_levels(cfg), cfg.fusion, 5, stride=2))
    plan += _dense_block_plan("msff.dense", cfg.fusion, cfg)
    plan.append(_conv2d("msff.out", cfg.fusion, F, 3, bn=False, act=False))
    # 3D matching
    c0 = _channels_3d(cfg, 0)
    plan.append(_conv3d("m3d.in", 2 * F, c0))
    if cfg.multiscale_3d:
        for lvl in range(cfg.levels_3d - 1):
            c = _channels_3d(cfg, lvl)
            for r in range(cfg.residual_pairs):
                plan.append(_conv3d(f"m3d.enc{lvl}.res{r}.a", c, c))
                plan.append(_conv3d(f"m3d.enc{lvl}.res{r}.b", c, c, act=False))
            plan.append(_conv3d(f"m3d.down{lvl + 1}", c, _channels_3d(cfg, lvl + 1), stride=2))
        for lvl in reversed(range(cfg.levels_3d - 1)):
            plan.append(_deconv3d(f"m3d.up{lvl}", _channels_3d(cfg, lvl + 1), _channels_3d(cfg, lvl)))
    else:
        for r in range(_single_scale_pairs(cfg)):
            plan.append(_conv3d(f"m3d.enc0.res{r}.a", c0, c0))
            plan.append(_conv3d(f"m3d.enc0.res{r}.b", c0, c0, act=False))
    plan.append(_conv3d("m3d.out", c0, 2 * F, bn=False, act=False))
    # scale recovery
    plan.append(_deconv3d("rec.up1", 2 * F, F))
    plan.append(_deconv3d("rec.up2", F, 1, bn=False, act=False))
    return plan


def count_params(cfg: ModelConfig) -> int:
    return sum(spec.param_count() for spec in layer_plan(cfg))


# ---------------------------------------------------------------- parameters

class ModelParams:
    """Named learnable weights plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, params: dict, stats: dict):
        self.config = config
        self.params = params
        self.stats = stats
        self.specs = {spec.name: spec for spec in layer_plan(config)}

    @classmethod
    def initialize(cls, config: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        params, stats = {}, {}
        for spec in layer_plan(config):
            fan_in = spec.cin * spec.k ** spec.rank
            if spec.transposed:
                fan_in //= 2 ** spec.rank
            gain = 2.0 if spec.relu else 1.0
            w = rng.standard_normal(spec.kernel_shape()) * np.sqrt(gain / max(fan_in, 1))
            if config.zero_init_residual and spec.name.endswith(".b") and ".res" in spec.name:
                w[...] = 0
            params[spec.name + ".weight"] = Parameter(w.astype(dtype), spec.name + ".weight")
            if spec.bias:
                params[spec.name + ".bias"] = Parameter(np.zeros(spec.cout, dtype), spec.name + ".bias")
            if spec.bn:
                params[spec.name + ".gamma"] = Parameter(np.ones(spec.cout, dtype), spec.name + ".gamma")
                params[spec.name + ".beta"] = Parameter(np.zeros(spec.cout, dtype), spec.name + ".beta")
                stats[spec.name] = RunningStats.fresh(spec.cout, dtype)
        return cls(config, params, stats)

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def named(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def scalar_count(self):
        return sum(p.size for p in self.params.values())

    def apply(self, name, x: Tensor, training: bool) -> Tensor:
        spec = self.specs[name]
        w = self.params[name + ".weight"]
        b = self.params.get(name + ".bias")
        if spec.transposed:
            y = transposed_convolve(x, w, b, stride=spec.stride, zero_pad=spec.pad, output_pad=1)
        else:
            y = convolve(x, w, b, stride=spec.stride, zero_pad=spec.pad)
        if spec.bn:
            y = batch_norm(y, self.params[name + ".gamma"], self.params[name + ".beta"],
                           self.stats[name], training=training)
        if spec.relu:
            y = relu(y)
        return y


# ---------------------------------------------------------------- forward

def _dense_block(prefix, x, net: ModelParams, training):
    cfg = net.config
    for j in range(cfg.dense_groups):
        feats = [x]
        for i in range(cfg.dense_block_depth):
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
            feats.append(net.apply(f"{prefix}.g{j}.l{i}", inp, training))
        x = net.apply(f"{prefix}.g{j}.trans", concat(feats, axis=1), training)
    return x


def _check_images(left, right, cfg):
    if left.shape != right.shape:
        raise ValueError(f"left/right shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 4 or left.shape[1] != 3:
        raise ValueError(f"images must be (batch, 3, H, W), got {left.shape}")
    div = cfg.spatial_divisor()
    H, W = left.shape[2:]
    if H % div or W % div:
        raise ValueError(f"image extents {H}x{W} must be divisible by {div} for this configuration")


def extract_features(left: Tensor, right: Tensor, net: ModelParams, training=True):
    """Siamese unary features at quarter resolution, shape (N, F, H/4, W/4)."""
    cfg = net.config
    _check_images(left, right, cfg)
    n = left.shape[0]
    # one pass over the stacked pair guarantees identical weights for both views
    x = concat([left, right], axis=0)
    scales = []
    for s in range(1, _pyramid_levels(cfg) + 1):
        x = net.apply(f"dsfe.s{s}.down", x, training)
        x = _dense_block(f"dsfe.s{s}.dense", x, net, training)
        scales.append(x)
    h, w = scales[0].shape[2:]
    fused = concat([scales[0]] + [resize_bilinear(f, h, w) for f in scales[1:]], axis=1)
    y = net.apply("msff.down", fused, training)
    y = _dense_block("msff.dense", y, net, training)
    y = net.apply("msff.out", y, training)
    left_feat, right_feat = split(y, [n, n], axis=0)
    return left_feat, right_feat


def build_cost_volume(left_feat: Tensor, right_feat: Tensor, max_disparity: int) -> Tensor:
    """Concatenate left features with right features shifted by each quarter-scale disparity.

    Output shape (N, 2F, D/4, h, w); right-border columns with x - d < 0 are zero.
    """
    if max_disparity % 4 or max_disparity < 4:
        raise ValueError(f"max_disparity must be a positive multiple of 4, got {max_disparity}")
    if left_feat.shape != right_feat.shape:
        raise ValueError(f"feature shapes differ: {left_feat.shape} vs {right_feat.shape}")
    N, F, h, w = left_feat.shape
    nd = max_disparity // 4
    out = np.zeros((N, 2 * F, nd, h, w), dtype=left_feat.dtype)
    L, R = left_feat.data, right_feat.data
    for d in range(nd):
        out[:, :F, d] = L
        if d < w:
            out[:, F:, d, :, d:] = R[:, :, :, :w - d]

    def backward(g):
        gl = g[:, :F].sum(axis=2)
        gr = np.zeros_like(R)
        for d in range(min(nd, w)):
            gr[:, :, :, :w - d] += g[:, F:, d, :, d:]
        return gl, gr

    return make_node(out, (left_feat, right_feat), backward)


def residual_pair(prefix, x, net: ModelParams, training):
    y = net.apply(prefix + ".a", x, training)
    y = net.apply(prefix + ".b", y, training)
    return x + y


def match_features(volume: Tensor, net: ModelParams, training=True) -> Tensor:
    """3D encoder-decoder over (disparity, height, width); output shape == input shape."""
    cfg = net.config
    if volume.ndim != 5 or volume.shape[1] != 2 * cfg.base_channels:
        raise ValueError(f"cost volume shape {volume.shape} inconsistent with "
                         f"base_channels={cfg.base_channels}")
    x = net.apply("m3d.in", volume, training)
    if not cfg.multiscale_3d:
        for r in range(_single_scale_pairs(cfg)):
            x = residual_pair(f"m3d.enc0.res{r}", x, net, training)
        return net.apply("m3d.out", x, training)
    div = 2 ** (cfg.levels_3d - 1)
    if any(n % div for n in volume.shape[2:]):
        raise ValueError(f"cost volume extents {volume.shape[2:]} must be divisible by {div} "
                         f"for levels_3d={cfg.levels_3d}")
    skips = []
    for lvl in range(cfg.levels_3d - 1):
        for r in range(cfg.residual_pairs):
            x = residual_pair(f"m3d.enc{lvl}.res{r}", x, net, training)
        skips.append(x)
        x = net.apply(f"m3d.down{lvl + 1}", x, training)
    for lvl in reversed(range(cfg.levels_3d - 1)):
        x = net.apply(f"m3d.up{lvl}", x, training) + skips[lvl]
    return net.apply("m3d.out", x, training)


def recover_scale(matched: Tensor, net: ModelParams, training=True) -> Tensor:
    """Two doubling transposed convolutions: (N, 2F, D/4, h, w) -> (N, D, 4h, 4w)."""
    x = net.apply("rec.up1", matched, training)
    x = net.apply("rec.up2", x, training)
    N, _, D, H, W = x.shape
    return x.reshape(N, D, H, W)


def soft_argmin(cost: Tensor) -> Tensor:
    """Expected disparity index under softmax(-cost) along axis 1; (N, D, H, W) -> (N, H, W)."""
    if cost.ndim != 4:
        raise ValueError(f"cost must be (batch, D, H, W), got {cost.shape}")
    D = cost.shape[1]
    neg = -cost.data
    e = np.exp(neg - neg.max(axis=1, keepdims=True))
    total = e.sum(axis=1, keepdims=True)
    p = e / total
    idx = np.arange(D, dtype=cost.dtype).reshape(1, D, 1, 1)
    # one division at the end keeps the uniform case exact: sum(d) / D = (D - 1) / 2
    raw = (e * idx).sum(axis=1) / total[:, 0]
    # a convex combination; clip only removes rounding overshoot
    disp = np.clip(raw, 0, D - 1)

    def backward(g):
        return (-p * (idx - raw[:, None]) * g[:, None],)

    return make_node(disp, (cost,), backward)


def forward(left, right, net: ModelParams, training=True) -> Tensor:
    """Full pipeline: images (N, 3, H, W) in [0, 1] -> disparity (N, H, W)."""
    dtype = np.dtype(net.config.dtype)
    if not isinstance(left, Tensor):
        left = Tensor(np.asarray(left, dtype=dtype))
    if not isinstance(right, Tensor):
        right = Tensor(np.asarray(right, dtype=dtype))
    lf, rf = extract_features(left, right, net, training)
    vol = build_cost_volume(lf, rf, net.config.max_disparity)
    if net.config.multiscale_3d:
        div = net.config.disparity_divisor()
        if net.config.max_disparity % div:
            raise ValueError(f"max_disparity {net.config.max_disparity} must be divisible by {div} "
                             f"for levels_3d={net.config.levels_3d}")
    matched = match_features(vol, net, training)
    return soft_argmin(recover_scale(matched, net, training))
