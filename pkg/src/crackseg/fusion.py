"""Spatial/frequency dual-domain fusion.

FreqDomainFilter splits the spectrum into horizontal/vertical high bands and
a complementary low band with learnable soft masks, refines each band with a
dynamic conv, and recombines under channel attention. DualPoolFusion anchors
auxiliary modalities to channel-attended RGB features via local avg/max
pooling. CrossScaleGate blends consecutive levels; SegHead aggregates all
levels into the sigmoid probability map.
"""

from __future__ import annotations

import numpy as np

from .dynconv import DynamicMultiKernelConv
from .numerics import (
    Module, ShapeError, Spectrum, Tensor, absolute, add, batch_norm,
    channel_project, concat, conv2d_depthwise, exp, index_last, irfft2,
    linear, maximum, mul, neg, param, pool2d, relu, reshape, rfft2, sigmoid,
    sorted_stack_sum, sub, uniform_init, upsample_bilinear,
)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class FreqDomainFilter(Module):
    """Adaptive frequency-band routing with directional spectrum convs."""

    def __init__(self, channels: int, r_init: float = 0.25,
                 tau_init: float = 10.0, rng: np.random.Generator | None = None,
                 ema_decay: float = 0.9):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.conv_h_w = uniform_init(rng, (channels, 1, 3), 3)
        self.conv_v_w = uniform_init(rng, (channels, 3, 1), 3)
        self.bn_h_gamma = param(np.ones(channels))
        self.bn_h_beta = param(np.zeros(channels))
        self.bn_v_gamma = param(np.ones(channels))
        self.bn_v_beta = param(np.zeros(channels))
        # radius kept nonnegative through |.|, temperature positive through exp
        self.radius_raw = param(np.array(r_init))
        self.log_tau = param(np.array(np.log(tau_init)))
        self.refine_high_h = DynamicMultiKernelConv(channels, channels,
                                                    ema_decay=ema_decay, rng=rng)
        self.refine_high_v = DynamicMultiKernelConv(channels, channels,
                                                    ema_decay=ema_decay, rng=rng)
        self.refine_low = DynamicMultiKernelConv(channels, channels,
                                                 ema_decay=ema_decay, rng=rng)
        self.attn_w = uniform_init(rng, (channels, 3 * channels), 3 * channels)
        self.attn_b = param(np.zeros(channels))

    # -- frequency geometry ---------------------------------------------------

    def frequency_masks(self, h: int, w: int):
        """Soft masks on the (h, w//2+1) half grid; low = 1 - max(high_h, high_v)."""
        half = w // 2 + 1
        d_h = np.broadcast_to(np.arange(half) / (w / 2), (h, half)).copy()
        rows = np.arange(h)
        d_v = np.broadcast_to((np.minimum(rows, h - rows) / (h / 2))[:, None],
                              (h, half)).copy()
        r = absolute(self.radius_raw)
        tau = exp(self.log_tau)
        m_h = sigmoid(mul(sub(Tensor(d_h), r), tau))
        m_v = sigmoid(mul(sub(Tensor(d_v), r), tau))
        m_low = add(neg(maximum(m_h, m_v)), 1.0)
        return m_h, m_v, m_low

    def band_split(self, x: Tensor):
        """Mask-routed reconstructions of the raw spectrum: (high_h, high_v, low)."""
        b, c, h, w = x.data.shape
        self._check_dims(h, w)
        sp = rfft2(x)
        m_h, m_v, m_low = self.frequency_masks(h, w)
        bands = []
        for m in (m_h, m_v, m_low):
            bands.append(irfft2(Spectrum(mul(sp.real, m), mul(sp.imag, m), w)))
        return tuple(bands)

    def _check_dims(self, h: int, w: int):
        if not (_is_pow2(h) and _is_pow2(w)):
            raise ShapeError(f"spectral filter needs power-of-two dims, got {h}x{w}")

    def _directional(self, part: Tensor, kernel: Tensor, gamma, beta) -> Tensor:
        return relu(batch_norm(conv2d_depthwise(part, kernel), gamma, beta))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        b, c, h, w = x.data.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.data.shape}")
        self._check_dims(h, w)
        sp = rfft2(x)
        m_h, m_v, m_low = self.frequency_masks(h, w)
        re_h = self._directional(sp.real, self.conv_h_w, self.bn_h_gamma, self.bn_h_beta)
        im_h = self._directional(sp.imag, self.conv_h_w, self.bn_h_gamma, self.bn_h_beta)
        re_v = self._directional(sp.real, self.conv_v_w, self.bn_v_gamma, self.bn_v_beta)
        im_v = self._directional(sp.imag, self.conv_v_w, self.bn_v_gamma, self.bn_v_beta)
        high_h = irfft2(Spectrum(mul(re_h, m_h), mul(im_h, m_h), w))
        high_v = irfft2(Spectrum(mul(re_v, m_v), mul(im_v, m_v), w))
        low = irfft2(Spectrum(mul(sp.real, m_low), mul(sp.imag, m_low), w))
        ref_h = self.refine_high_h(high_h, training=training)
        ref_v = self.refine_high_v(high_v, training=training)
        ref_low = self.refine_low(low, training=training)
        desc = concat([pool2d(ref_h, "avg"), pool2d(ref_v, "avg"),
                       pool2d(ref_low, "avg")], axis=1)
        attn = sigmoid(channel_project(desc, self.attn_w, self.attn_b))
        return add(add(mul(x, attn), ref_h), add(ref_v, ref_low))

    __call__ = forward


class DualPoolFusion(Module):
    """RGB-anchored fusion: channel-attention enhanced RGB plus dual-pooled
    per-auxiliary maps, each refined by its own dynamic conv."""

    def __init__(self, channels: int, num_aux: int,
                 rng: np.random.Generator | None = None, ema_decay: float = 0.9):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.attn_w = uniform_init(rng, (channels, channels), channels)
        self.attn_b = param(np.zeros(channels))
        self.w_avg = param(np.array(0.5))
        self.w_max = param(np.array(0.5))
        self.aux_refine = [DynamicMultiKernelConv(channels, channels,
                                                  ema_decay=ema_decay, rng=rng)
                           for _ in range(num_aux)]

    def rgb_enhance(self, rgb: Tensor) -> Tensor:
        b, c = rgb.data.shape[:2]
        pooled = reshape(pool2d(rgb, "avg"), (b, c))
        attn = sigmoid(linear(pooled, self.attn_w, self.attn_b))
        return mul(rgb, reshape(attn, (b, c, 1, 1)))

    def fuse_modality(self, rgb_enhanced: Tensor, aux: Tensor, index: int,
                      training: bool = False) -> Tensor:
        if rgb_enhanced.data.shape != aux.data.shape:
            raise ShapeError(f"modality shape {aux.data.shape} != rgb "
                             f"{rgb_enhanced.data.shape}")
        mixed = add(rgb_enhanced, aux)
        pooled = add(mul(pool2d(mixed, "avg", 3), self.w_avg),
                     mul(pool2d(mixed, "max", 3), self.w_max))
        return self.aux_refine[index](pooled, training=training)

    @staticmethod
    def sum_modalities(rgb_enhanced: Tensor, fused: list[Tensor]) -> Tensor:
        # canonical accumulation: the total is bit-identical under any
        # reordering of the auxiliary maps
        if not fused:
            return rgb_enhanced
        return add(rgb_enhanced, sorted_stack_sum(fused))


class CrossScaleGate(Module):
    """Per-channel convex blend of the current level with the previous one."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.gate_w = uniform_init(rng, (channels, channels), channels)
        self.gate_b = param(np.zeros(channels))

    def forward(self, current: Tensor, previous: Tensor | None, level: int) -> Tensor:
        if level == 0:
            return current
        if previous is None:
            raise ValueError(f"level {level} needs the previous-level map")
        b, c = previous.data.shape[:2]
        pooled = reshape(pool2d(previous, "avg"), (b, c))
        gate = reshape(sigmoid(linear(pooled, self.gate_w, self.gate_b)),
                       (b, c, 1, 1))
        return add(mul(current, gate), mul(previous, add(neg(gate), 1.0)))

    __call__ = forward


class SegHead(Module):
    """Level aggregation (learned weights, uniform init) -> linear -> 1-channel
    pointwise -> bilinear upsample -> sigmoid."""

    def __init__(self, channels: int, num_levels: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.level_weights = param(np.full(num_levels, 1.0 / num_levels))
        self.mix_w = uniform_init(rng, (channels, channels), channels)
        self.mix_b = param(np.zeros(channels))
        self.out_w = uniform_init(rng, (1, channels), channels)
        self.out_b = param(np.zeros(1))

    def forward(self, levels: list[Tensor], out_hw: tuple) -> Tensor:
        if len(levels) != self.level_weights.data.size:
            raise ShapeError(f"{len(levels)} levels for "
                             f"{self.level_weights.data.size} weights")
        for lv in levels:
            if lv.data.shape[1] != self.channels:
                raise ShapeError(f"level channels {lv.data.shape[1]} != "
                                 f"{self.channels}")
        common = (max(lv.data.shape[2] for lv in levels),
                  max(lv.data.shape[3] for lv in levels))
        total = None
        for i, lv in enumerate(levels):
            up = lv if lv.data.shape[2:] == common else upsample_bilinear(lv, common)
            term = mul(up, index_last(self.level_weights, i))
            total = term if total is None else add(total, term)
        mixed = channel_project(total, self.mix_w, self.mix_b)
        logits = channel_project(mixed, self.out_w, self.out_b)
        return sigmoid(upsample_bilinear(logits, out_hw))

    __call__ = forward
