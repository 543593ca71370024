"""Dynamic multi-kernel convolution.

A pointwise squeeze to a mid width, a channel scorer that gates the top-k
channels (k tracked by an EMA of the mean score), three reparameterized
depthwise branches (3/5/7) concatenated and mixed back out, plus a residual.
Bias-free apart from the scorer, so the whole layer stays far below a plain
dense k x k convolution in weight count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    Module, ShapeError, Tensor, add, channel_project, concat, conv2d_depthwise,
    linear, mul, param, pool2d, relu, reshape, sigmoid, sub, tmean,
    uniform_init,
)


@dataclass(frozen=True)
class EmaState:
    """Tracks the running mean channel score and the active-channel count."""
    decay: float = 0.9
    rho_hat: float = 1.0
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {self.decay}")


def ema_update(state: EmaState, scores: np.ndarray) -> tuple[EmaState, int]:
    """Fold the batch-mean score into the tracker and derive the new k.

    k = clamp(floor(C_mid * rho_hat), 1, C_mid). decay=0 reduces to the
    instantaneous mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    c_mid = scores.shape[-1]
    rho = float(scores.mean())
    new_rho = state.decay * state.rho_hat + (1.0 - state.decay) * rho
    new_state = replace(state, rho_hat=new_rho, step=state.step + 1)
    k = int(np.clip(int(np.floor(c_mid * new_rho)), 1, c_mid))
    return new_state, k


def select_topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the k highest scores along the last axis.

    Ties break toward the lower channel index (stable argsort on the negated
    scores), so the mask is deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[-1]
    if not 1 <= k <= c:
        raise ValueError(f"top-k needs 1 <= k <= {c}, got {k}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros_like(scores)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


class DynamicMultiKernelConv(Module):
    """See module docstring. Forward keeps the channel mask off-tape
    (straight-through); soft_mask=True multiplies by the sigmoid scores
    instead, which makes every parameter reachable for gradient checks."""

    KERNEL_SIZES = (3, 5, 7)

    def __init__(self, c_in: int, c_out: int, c_mid: int | None = None,
                 reduction: int = 4, ema_decay: float = 0.9,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c_mid = c_mid if c_mid is not None else max(c_in // 2, 1)
        c_red = max(c_mid // reduction, 1)
        self.c_in, self.c_out, self.c_mid = c_in, c_out, c_mid
        self.squeeze_w = uniform_init(rng, (c_mid, c_in), c_in)
        self.score1_w = uniform_init(rng, (c_red, c_mid), c_mid)
        self.score1_b = param(np.zeros(c_red))
        self.score2_w = uniform_init(rng, (c_mid, c_red), c_red)
        self.score2_b = param(np.zeros(c_mid))
        self.branch_w = [uniform_init(rng, (c_mid, k, k), k * k)
                         for k in self.KERNEL_SIZES]
        self.branch_alpha = [param(np.zeros(())) for _ in self.KERNEL_SIZES]
        self.branch_beta = [param(np.zeros(())) for _ in self.KERNEL_SIZES]
        self.mix_w = uniform_init(rng, (c_out, len(self.KERNEL_SIZES) * c_mid),
                                  len(self.KERNEL_SIZES) * c_mid)
        self.proj_res_w = None if c_in == c_out else uniform_init(rng, (c_out, c_in), c_in)
        self.ema = EmaState(decay=ema_decay)
        self.k_active = c_mid

    # -- pieces --------------------------------------------------------------

    def score_channels(self, feats: Tensor) -> Tensor:
        """(B, C_mid, H, W) -> sigmoid scores (B, C_mid)."""
        g = reshape(pool2d(feats, "avg"), (feats.shape[0], self.c_mid))
        h = relu(linear(g, self.score1_w, self.score1_b))
        return sigmoid(linear(h, self.score2_w, self.score2_b))

    def reparam_kernel(self, i: int) -> Tensor:
        """(1 + alpha) * W + beta for branch i; stays on tape."""
        one_plus = add(self.branch_alpha[i], 1.0)
        return add(mul(self.branch_w[i], one_plus), self.branch_beta[i])

    # -- forward ---------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False,
                soft_mask: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.c_in:
            raise ShapeError(f"expected (B,{self.c_in},H,W), got {x.data.shape}")
        mid = channel_project(x, self.squeeze_w)
        scores = self.score_channels(mid)
        if training:
            self.ema, self.k_active = ema_update(self.ema, scores.data)
        if soft_mask:
            gated = mul(mid, reshape(scores, scores.data.shape + (1, 1)))
        else:
            s_bar = tmean(scores, axis=0)
            mask = Tensor(select_topk_mask(s_bar.data, self.k_active))
            if training:
                # straight-through: an exactly-zero forward term carries the
                # score gradient through the hard mask
                zero_bridge = sub(s_bar, Tensor(s_bar.data.copy()))
                gate = reshape(add(mask, zero_bridge), (1, self.c_mid, 1, 1))
            else:
                # eval forward is the pure piecewise function, so central
                # differences agree with the tape
                gate = reshape(mask, (1, self.c_mid, 1, 1))
            gated = mul(mid, gate)
        branches = [conv2d_depthwise(gated, self.reparam_kernel(i))
                    for i in range(len(self.KERNEL_SIZES))]
        out = channel_project(concat(branches, axis=1), self.mix_w)
        res = x if self.proj_res_w is None else channel_project(x, self.proj_res_w)
        return add(out, res)

    __call__ = forward

    # -- bookkeeping -----------------------------------------------------------

    def local_state(self) -> dict:
        return {"ema_rho_hat": self.ema.rho_hat, "ema_step": self.ema.step,
                "k_active": self.k_active}

    def set_local_state(self, state: dict) -> None:
        if "ema_rho_hat" in state:
            self.ema = replace(self.ema, rho_hat=float(state["ema_rho_hat"]),
                               step=int(state.get("ema_step", 0)))
        if "k_active" in state:
            self.k_active = int(state["k_active"])

    def weight_count(self) -> int:
        """Trainable parameter count excluding biases."""
        return self.param_count(include_bias=False)


def dense_conv_weight_count(c_in: int, c_out: int, k: int) -> int:
    """Weights of the plain dense conv this layer replaces."""
    return c_in * c_out * k * k
