"""Mask-guided scan sequencing.

A binary crack mask is reduced to per-patch counts through an exclusive
integral image; patches with any crack pixel form the priority segment of the
scan order, the rest trail behind, in two traversal directions with forward
and reversed variants. Baseline raster/diagonal/snake orders and a JSON scan
cache round out the module.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class BinaryMask:
    values: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        uniq = np.unique(self.values)
        if not set(uniq.tolist()) <= {0, 1}:
            raise ValueError(f"mask must be binary, found values {uniq[:8]}")
        self.values = self.values.astype(np.uint8)

    @property
    def hash_hex(self) -> str:
        return f"{fnv1a64(self.values.tobytes()):016x}"


def integral_image(mask: BinaryMask | np.ndarray) -> np.ndarray:
    """Exclusive (H+1)x(W+1) prefix table: I[x][y] = sum(mask[:x, :y])."""
    values = mask.values if isinstance(mask, BinaryMask) else BinaryMask(mask).values
    h, w = values.shape
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    table[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    return table


def patch_score(integral: np.ndarray, i: int, j: int, p: int) -> int:
    """Exact count of ones in the p x p patch whose top-left pixel is (i, j)."""
    h, w = integral.shape[0] - 1, integral.shape[1] - 1
    if i < 0 or j < 0 or i + p > h or j + p > w:
        raise ValueError(f"patch ({i},{j}) size {p} outside {h}x{w} image")
    return int(integral[i + p, j + p] - integral[i + p, j]
               - integral[i, j + p] + integral[i, j])


@dataclass
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int
    scores: np.ndarray  # (grid_h * grid_w,) int64, row-major patch ids

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


def build_patch_grid(mask: BinaryMask, p: int) -> PatchGrid:
    h, w = mask.values.shape
    if p <= 0 or h % p or w % p:
        raise ValueError(f"patch size {p} does not tile mask {h}x{w}")
    integral = integral_image(mask)
    coarse = integral[::p, ::p]
    scores = (coarse[1:, 1:] - coarse[1:, :-1] - coarse[:-1, 1:] + coarse[:-1, :-1])
    return PatchGrid(p, h // p, w // p, scores.reshape(-1).astype(np.int64))


@dataclass
class ScanSequence:
    direction: str           # "h" or "v"
    order: str               # "tb" or "bt"
    indices: np.ndarray      # permutation of 0..n-1, int64
    crack_len: int = -1      # -1 when unknown (cache entries do not persist it)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


KEYS = ("h_tb", "h_bt", "v_tb", "v_bt")


@dataclass
class ScanBundle:
    h_tb: ScanSequence
    h_bt: ScanSequence
    v_tb: ScanSequence
    v_bt: ScanSequence
    mask_hash: str = ""
    patch_size: int = 0

    def __getitem__(self, key: str) -> ScanSequence:
        if key not in KEYS:
            raise KeyError(key)
        return getattr(self, key)

    def sequences(self):
        return [(k, getattr(self, k)) for k in KEYS]

    @property
    def num_patches(self) -> int:
        return int(self.h_tb.indices.size)


def _traversal(grid: PatchGrid, direction: str) -> np.ndarray:
    """Row-major patch ids visited in traversal order: h scans rows first,
    v scans columns first."""
    ids = np.arange(grid.num_patches, dtype=np.int64)
    if direction == "h":
        return ids
    if direction == "v":
        return ids.reshape(grid.grid_h, grid.grid_w).T.reshape(-1)
    raise ValueError(f"unknown direction {direction!r}")


def partition_patches(grid: PatchGrid, direction: str):
    """(crack ids, background ids) in traversal order."""
    visit = _traversal(grid, direction)
    scores = grid.scores[visit]
    return visit[scores > 0], visit[scores == 0]


def build_sequences(grid: PatchGrid, mask_hash: str = "") -> ScanBundle:
    seqs = {}
    for d in ("h", "v"):
        crack, back = partition_patches(grid, d)
        seqs[f"{d}_tb"] = ScanSequence(d, "tb", np.concatenate([crack, back]),
                                       crack_len=len(crack))
        seqs[f"{d}_bt"] = ScanSequence(d, "bt",
                                       np.concatenate([crack[::-1], back[::-1]]),
                                       crack_len=len(crack))
    return ScanBundle(**seqs, mask_hash=mask_hash, patch_size=grid.patch_size)


def mask_scan_bundle(mask: BinaryMask, p: int) -> ScanBundle:
    return build_sequences(build_patch_grid(mask, p), mask_hash=mask.hash_hex)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing inter-class variance. Pixels strictly
    above the returned value are foreground; a flat image yields its own
    value so the mask comes back empty."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = hist.cumsum()[:-1].astype(np.float64)
    w1 = v.size - w0
    mass = (hist * centers).cumsum()
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(mass[:-1], w0, out=np.zeros_like(w0), where=valid)
    mu1 = np.divide(mass[-1] - mass[:-1], w1, out=np.zeros_like(w1), where=valid)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    return float(edges[int(between.argmax()) + 1])


# -- baselines ----------------------------------------------------------------

def _raster(gh: int, gw: int) -> np.ndarray:
    return np.arange(gh * gw, dtype=np.int64)


def _column_major(gh: int, gw: int) -> np.ndarray:
    return np.arange(gh * gw, dtype=np.int64).reshape(gh, gw).T.reshape(-1)


def _row_snake(gh: int, gw: int) -> np.ndarray:
    out = []
    for a in range(gh):
        row = [a * gw + b for b in range(gw)]
        out.extend(row if a % 2 == 0 else row[::-1])
    return np.array(out, dtype=np.int64)


def _col_snake(gh: int, gw: int) -> np.ndarray:
    out = []
    for b in range(gw):
        col = [a * gw + b for a in range(gh)]
        out.extend(col if b % 2 == 0 else col[::-1])
    return np.array(out, dtype=np.int64)


def _antidiagonals(gh: int, gw: int, row_first: bool):
    """Cells grouped by a+b; within a diagonal, row index ascends (row_first)
    or descends."""
    for s in range(gh + gw - 1):
        cells = [(a, s - a) for a in range(max(0, s - gw + 1), min(gh, s + 1))]
        yield cells if row_first else cells[::-1]


def _diag(gh: int, gw: int, row_first: bool) -> np.ndarray:
    out = [a * gw + b for cells in _antidiagonals(gh, gw, row_first)
           for a, b in cells]
    return np.array(out, dtype=np.int64)


def _diag_snake(gh: int, gw: int, row_first: bool) -> np.ndarray:
    out = []
    for s, cells in enumerate(_antidiagonals(gh, gw, row_first)):
        out.extend(cells if s % 2 == 0 else cells[::-1])
    return np.array([a * gw + b for a, b in out], dtype=np.int64)


BASELINE_KINDS = ("Para", "Diag", "ParaSnake", "DiagSnake",
                  "biParaSnake", "biDiagSnake")


def baseline_sequence(kind: str, grid_dims: tuple) -> ScanBundle:
    """Mask-independent scan order bundles. The bi- variants reuse a single
    snake path for both axes: (P, reverse(P), P, reverse(P))."""
    gh, gw = grid_dims
    if kind == "Para":
        h, v = _raster(gh, gw), _column_major(gh, gw)
    elif kind == "Diag":
        h, v = _diag(gh, gw, True), _diag(gh, gw, False)
    elif kind == "ParaSnake":
        h, v = _row_snake(gh, gw), _col_snake(gh, gw)
    elif kind == "DiagSnake":
        h, v = _diag_snake(gh, gw, True), _diag_snake(gh, gw, False)
    elif kind == "biParaSnake":
        h = _row_snake(gh, gw)
        v = h
    elif kind == "biDiagSnake":
        h = _diag_snake(gh, gw, True)
        v = h
    else:
        raise ValueError(f"unknown baseline kind {kind!r}; pick from {BASELINE_KINDS}")
    return ScanBundle(
        h_tb=ScanSequence("h", "tb", h, 0),
        h_bt=ScanSequence("h", "bt", h[::-1].copy(), 0),
        v_tb=ScanSequence("v", "tb", v, 0),
        v_bt=ScanSequence("v", "bt", v[::-1].copy(), 0),
        mask_hash="", patch_size=0)


# -- cache ---------------------------------------------------------------------

CACHE_VERSION = 1


def save_cache(bundles: dict[str, ScanBundle], path) -> None:
    entries = {}
    for image_id, b in sorted(bundles.items()):
        entries[image_id] = {"mask_hash": b.mask_hash}
        for key in KEYS:
            entries[image_id][key] = b[key].indices.tolist()
    patch_size = next(iter(bundles.values())).patch_size if bundles else 0
    doc = {"version": CACHE_VERSION, "patch_size": patch_size, "entries": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_cache(path) -> tuple[dict[str, ScanBundle], int]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        version = doc["version"]
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        patch_size = int(doc["patch_size"])
        bundles = {}
        for image_id, entry in doc["entries"].items():
            seqs = {key: ScanSequence(key[0], key[2:],
                                      np.array(entry[key], dtype=np.int64))
                    for key in KEYS}
            bundles[image_id] = ScanBundle(**seqs, mask_hash=entry["mask_hash"],
                                           patch_size=patch_size)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt scan cache {path}: {exc}") from exc
    return bundles, patch_size


def bundle_for_mask(cache: dict[str, ScanBundle], mask: BinaryMask, p: int,
                    strict: bool = False) -> ScanBundle:
    """Cached bundle when fresh, regenerated otherwise. A stale hash warns
    with both hashes; strict mode refuses missing or stale entries."""
    cached = cache.get(mask.image_id)
    if cached is not None:
        if cached.mask_hash == mask.hash_hex:
            return cached
        warnings.warn(f"scan cache stale for {mask.image_id!r}: "
                      f"cached {cached.mask_hash} vs current {mask.hash_hex}")
        if strict:
            raise KeyError(f"strict cache: stale entry for {mask.image_id!r}")
    elif strict:
        raise KeyError(f"strict cache: no entry for {mask.image_id!r}")
    else:
        warnings.warn(f"scan cache miss for {mask.image_id!r}; generating")
    return mask_scan_bundle(mask, p)


# -- reorder -------------------------------------------------------------------

def reorder(tokens, sequence: ScanSequence):
    """Permute (B, C, N) tokens along the last axis into scan order."""
    from .numerics import gather_last
    n = tokens.data.shape[-1] if hasattr(tokens, "data") else tokens.shape[-1]
    if n != sequence.indices.size:
        raise ValueError(f"token count {n} != sequence length {sequence.indices.size}")
    return gather_last(tokens, sequence.indices)


def inverse_reorder(tokens, sequence: ScanSequence):
    from .numerics import gather_last
    n = tokens.data.shape[-1] if hasattr(tokens, "data") else tokens.shape[-1]
    if n != sequence.indices.size:
        raise ValueError(f"token count {n} != sequence length {sequence.indices.size}")
    return gather_last(tokens, np.argsort(sequence.indices))


# -- microbenchmark -------------------------------------------------------------

def median_latency_ns(fn, iters: int = 1000, warmup: int = 50) -> float:
    """Median wall time of fn() in nanoseconds on a monotonic clock."""
    for _ in range(warmup):
        fn()
    samples = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    return float(np.median(samples))
