"""Visual state-space block with mask-guided scan orders.

DualPoolDenoiser cleans the map (avg+max local pooling into a dynamic conv
with a residual), then tokens are scanned in the four bundle directions by a
diagonal zero-order-hold SSM, merged back to raster order, projected, and
multiplicatively gated.
"""

from __future__ import annotations

import numpy as np

from .dynconv import DynamicMultiKernelConv
from .numerics import (
    Module, ShapeError, Tensor, add, channel_project, exp, expm1_over_x,
    gather_last, group_norm, index_last, mul, param, pool2d, relu, reshape,
    sigmoid, stack_last, tsum, uniform_init,
)
from .scanseq import KEYS, ScanBundle, ScanSequence


class DualPoolDenoiser(Module):
    """out = ReLU(GroupNorm(DynConv(avg3(x) + max3(x)))) + x"""

    def __init__(self, channels: int, groups: int = 4,
                 rng: np.random.Generator | None = None, ema_decay: float = 0.9):
        rng = rng or np.random.default_rng(0)
        if channels % groups:
            raise ShapeError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.inner = DynamicMultiKernelConv(channels, channels,
                                            ema_decay=ema_decay, rng=rng)
        self.gn_gamma = param(np.ones(channels))
        self.gn_beta = param(np.zeros(channels))

    def pooled(self, x: Tensor) -> Tensor:
        return add(pool2d(x, "avg", 3), pool2d(x, "max", 3))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        den = relu(group_norm(self.inner(self.pooled(x), training=training),
                              self.groups, self.gn_gamma, self.gn_beta))
        return add(den, x)

    __call__ = forward


class DirPosEmbedding(Module):
    """Four direction vectors plus a shared position table indexed by scan
    position (slot 0 is always 'scanned first')."""

    def __init__(self, channels: int, num_tokens: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dir_vectors = [param(rng.normal(0, 0.02, size=channels)) for _ in KEYS]
        self.pos_table = param(rng.normal(0, 0.02, size=(channels, num_tokens)))

    def key_index(self, sequence: ScanSequence) -> int:
        return KEYS.index(f"{sequence.direction}_{sequence.order}")

    def apply(self, reordered: Tensor, sequence: ScanSequence) -> Tensor:
        c, n = self.pos_table.data.shape
        if reordered.data.shape[-1] != n:
            raise ShapeError(f"token count {reordered.data.shape[-1]} != "
                             f"position table {n}")
        dvec = reshape(self.dir_vectors[self.key_index(sequence)], (1, c, 1))
        return add(add(reordered, dvec), reshape(self.pos_table, (1, c, n)))


def _indices_of(sequence) -> np.ndarray:
    """(N,) for a shared sequence or (B, N) for per-sample sequences."""
    if isinstance(sequence, ScanSequence):
        return sequence.indices
    return np.stack([s.indices for s in sequence])


def embed_sequence(tokens: Tensor, sequence, emb: DirPosEmbedding) -> Tensor:
    """Reorder raster tokens into scan order and add both embeddings."""
    idx = _indices_of(sequence)
    if idx.shape[-1] != tokens.data.shape[-1]:
        raise ShapeError(f"sequence length {idx.shape[-1]} != token count "
                         f"{tokens.data.shape[-1]}")
    first = sequence if isinstance(sequence, ScanSequence) else sequence[0]
    return emb.apply(gather_last(tokens, idx), first)


class SsmParams(Module):
    """Diagonal per-channel state space: ΔA/ΔB/readout are (C, N_state),
    skip is (C,)."""

    def __init__(self, channels: int, state_dim: int = 8,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.state_dim = state_dim
        self.delta_a = param(-rng.uniform(0.1, 1.0, size=(channels, state_dim)))
        self.delta_b = param(rng.normal(0, 0.2, size=(channels, state_dim)))
        self.readout = param(rng.normal(0, 0.2, size=(channels, state_dim)))
        self.skip = param(np.ones(channels))


def selective_scan(params: SsmParams, tokens: Tensor) -> Tensor:
    """Sequential recurrence over (B, C, N) tokens.

    h_k = exp(dA) * h_{k-1} + phi1(dA) * dB * x_k, y_k = <readout, h_k> + skip * x_k.
    phi1 covers the dA -> 0 limit, so a zero transition becomes a prefix sum.
    """
    for name in ("delta_a", "delta_b", "readout", "skip"):
        if not np.all(np.isfinite(getattr(params, name).data)):
            raise FloatingPointError(f"non-finite SSM parameter {name}")
    b, c, n = tokens.data.shape
    if n < 1:
        raise ShapeError("selective_scan needs at least one token")
    a_bar = exp(params.delta_a)
    b_bar = mul(expm1_over_x(params.delta_a), params.delta_b)
    h = Tensor(np.zeros((b, c, params.state_dim)))
    ys = []
    for k in range(n):
        x_k = index_last(tokens, k)
        h = add(mul(h, a_bar), mul(b_bar, reshape(x_k, (b, c, 1))))
        y_k = add(tsum(mul(h, params.readout), axis=-1), mul(params.skip, x_k))
        ys.append(y_k)
    return stack_last(ys)


def merge_directions(outputs: list[Tensor], sequences, proj_w: Tensor,
                     proj_b: Tensor | None = None) -> Tensor:
    """Inverse-reorder each directional output to raster order, sum, project."""
    if len(outputs) != len(sequences):
        raise ShapeError(f"{len(outputs)} outputs for {len(sequences)} sequences")
    total = None
    for out, seq in zip(outputs, sequences):
        idx = _indices_of(seq)
        if idx.shape[-1] != out.data.shape[-1]:
            raise ShapeError(f"sequence length {idx.shape[-1]} != output "
                             f"{out.data.shape}")
        inv = np.argsort(idx, axis=-1)
        back = gather_last(out, inv)
        total = back if total is None else add(total, back)
    return channel_project(total, proj_w, proj_b)


class VssBlock(Module):
    """DualPoolDenoiser x2 -> four-direction selective scan -> merge -> gate."""

    def __init__(self, channels: int, grid_hw: tuple, state_dim: int = 8,
                 groups: int = 4, rng: np.random.Generator | None = None,
                 ema_decay: float = 0.9):
        rng = rng or np.random.default_rng(0)
        self.grid_hw = tuple(grid_hw)
        n = grid_hw[0] * grid_hw[1]
        self.denoise1 = DualPoolDenoiser(channels, groups, rng, ema_decay)
        self.denoise2 = DualPoolDenoiser(channels, groups, rng, ema_decay)
        self.embedding = DirPosEmbedding(channels, n, rng)
        self.scans = [SsmParams(channels, state_dim, rng) for _ in KEYS]
        self.merge_w = uniform_init(rng, (channels, channels), channels)
        self.merge_b = param(np.zeros(channels))
        self.gate_w = uniform_init(rng, (channels, channels), channels)
        self.gate_b = param(np.zeros(channels))

    def forward(self, x: Tensor, bundle, training: bool = False) -> Tensor:
        b, c, h, w = x.data.shape
        if (h, w) != self.grid_hw:
            raise ShapeError(f"input {x.data.shape} does not match block grid "
                             f"{self.grid_hw}")
        bundles = [bundle] * b if isinstance(bundle, ScanBundle) else list(bundle)
        if len(bundles) != b:
            raise ShapeError(f"{len(bundles)} bundles for batch {b}")
        n = h * w
        for bu in bundles:
            if bu.num_patches != n:
                raise ShapeError(f"bundle has {bu.num_patches} patches, grid has {n}")
        feats = self.denoise2(self.denoise1(x, training), training)
        tokens = reshape(feats, (b, c, n))
        outs, seqs = [], []
        for i, key in enumerate(KEYS):
            seq_group = [bu[key] for bu in bundles]
            shared = all(np.array_equal(s.indices, seq_group[0].indices)
                         for s in seq_group[1:])
            seq = seq_group[0] if shared else seq_group
            embedded = embed_sequence(tokens, seq, self.embedding)
            outs.append(selective_scan(self.scans[i], embedded))
            seqs.append(seq)
        merged = merge_directions(outs, seqs, self.merge_w, self.merge_b)
        gated = mul(merged, sigmoid(channel_project(merged, self.gate_w, self.gate_b)))
        return reshape(gated, (b, c, h, w))

    __call__ = forward
