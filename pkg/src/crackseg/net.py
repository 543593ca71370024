"""Full network assembly.

Each modality runs its own patch embedding and stack of state-space blocks;
every stage output passes through a per-level frequency filter, the RGB
stream anchors dual-pool fusion of the auxiliaries, gated cross-level
blending feeds the segmentation head. Checkpoints serialize to JSON with a
config snapshot so a reload reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynconv import DynamicMultiKernelConv, dense_conv_weight_count
from .fusion import CrossScaleGate, DualPoolFusion, FreqDomainFilter, SegHead
from .numerics import (
    Module, ShapeError, Tensor, astensor, channel_project, reshape, transpose,
    uniform_init, param,
)
from .scanseq import BinaryMask, ScanBundle, mask_scan_bundle, otsu_threshold
from .vssblock import VssBlock


@dataclass
class NetConfig:
    patch: int = 8
    stages: int = 4
    width: int = 16
    resolution: int = 64
    modality_channels: tuple = (3, 1)
    state_dim: int = 8
    norm_groups: int = 4
    ema_decay: float = 0.9
    loss_eps: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.modality_channels = tuple(int(c) for c in self.modality_channels)
        if self.patch < 1 or self.resolution % self.patch:
            raise ValueError(f"patch {self.patch} must divide resolution "
                             f"{self.resolution}")
        if self.stages < 1:
            raise ValueError(f"need at least one stage, got {self.stages}")
        if not self.modality_channels:
            raise ValueError("need at least one modality")
        if any(c < 1 for c in self.modality_channels):
            raise ValueError(f"bad channel counts {self.modality_channels}")
        if self.width < 1 or self.width % self.norm_groups:
            raise ValueError(f"width {self.width} must be a positive multiple "
                             f"of norm_groups {self.norm_groups}")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_channels)

    @property
    def grid_hw(self) -> tuple:
        g = self.resolution // self.patch
        return (g, g)


@dataclass
class ModalityBatch:
    """Aligned per-modality inputs for one batch; index 0 is RGB."""

    images: list
    ids: list = field(default_factory=list)
    bundles: list | None = None

    def __post_init__(self):
        if not self.images:
            raise ShapeError("batch needs at least one modality")
        shapes = [np.shape(im.data if isinstance(im, Tensor) else im)
                  for im in self.images]
        for s in shapes:
            if len(s) != 4:
                raise ShapeError(f"modality maps must be 4D, got {s}")
        b, h, w = shapes[0][0], shapes[0][2], shapes[0][3]
        for s in shapes[1:]:
            if s[0] != b or s[2:] != (h, w):
                raise ShapeError(f"modality shape {s} does not align with "
                                 f"batch {b} at {h}x{w}")
        if not self.ids:
            self.ids = [f"item{i}" for i in range(b)]
        if len(self.ids) != b:
            raise ShapeError(f"{len(self.ids)} ids for batch of {b}")
        if self.bundles is not None and len(self.bundles) != b:
            raise ShapeError(f"{len(self.bundles)} bundles for batch of {b}")

    @property
    def batch_size(self) -> int:
        im = self.images[0]
        return (im.data if isinstance(im, Tensor) else im).shape[0]


def patch_embed(image, p: int, proj_w: Tensor, proj_b=None) -> Tensor:
    """Non-overlapping p x p patches flattened and projected per token."""
    image = astensor(image)
    b, c, h, w = image.data.shape
    if h % p or w % p:
        raise ShapeError(f"patch {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    t = reshape(image, (b, c, gh, p, gw, p))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return channel_project(reshape(t, (b, c * p * p, gh, gw)), proj_w, proj_b)


class ModalityStream(Module):
    """Patch embedding plus the per-modality stack of state-space blocks."""

    def __init__(self, in_channels: int, cfg: NetConfig, rng):
        self.patch = cfg.patch
        fan = in_channels * cfg.patch * cfg.patch
        self.embed_w = uniform_init(rng, (cfg.width, fan), fan)
        self.embed_b = param(np.zeros(cfg.width))
        self.blocks = [VssBlock(cfg.width, cfg.grid_hw, cfg.state_dim,
                                cfg.norm_groups, rng, cfg.ema_decay)
                       for _ in range(cfg.stages)]

    def run(self, image, bundles, training: bool) -> list:
        t = patch_embed(image, self.patch, self.embed_w, self.embed_b)
        feats = []
        for block in self.blocks:
            t = block(t, bundles, training=training)
            feats.append(t)
        return feats


class CrackSegNet(Module):
    def __init__(self, config: NetConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        m = config.num_modalities
        self.streams = [ModalityStream(c, config, rng)
                        for c in config.modality_channels]
        self.freq_filters = [FreqDomainFilter(config.width, rng=rng,
                                              ema_decay=config.ema_decay)
                             for _ in range(config.stages)]
        self.fusions = [DualPoolFusion(config.width, m - 1, rng=rng,
                                       ema_decay=config.ema_decay)
                        for _ in range(config.stages)]
        self.gates = [CrossScaleGate(config.width, rng=rng)
                      for _ in range(config.stages - 1)]
        self.head = SegHead(config.width, config.stages, rng=rng)

    def _check_batch(self, batch: ModalityBatch):
        cfg = self.config
        if len(batch.images) != cfg.num_modalities:
            raise ShapeError(f"model expects {cfg.num_modalities} modalities, "
                             f"batch has {len(batch.images)}")
        for i, im in enumerate(batch.images):
            shape = np.shape(im.data if isinstance(im, Tensor) else im)
            want = cfg.modality_channels[i]
            if shape[1] != want:
                raise ShapeError(f"modality {i} has {shape[1]} channels, "
                                 f"config says {want}")
            if shape[2:] != (cfg.resolution, cfg.resolution):
                raise ShapeError(f"modality {i} is {shape[2]}x{shape[3]}, "
                                 f"config resolution is {cfg.resolution}")

    def _resolve_bundles(self, batch: ModalityBatch, strict: bool) -> list:
        rgb = batch.images[0]
        rgb = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
        given = list(batch.bundles) if batch.bundles is not None \
            else [None] * batch.batch_size
        out = []
        for i, bu in enumerate(given):
            if bu is None:
                if strict:
                    raise LookupError(f"no scan bundle for {batch.ids[i]!r} "
                                      "and strict bundle mode is on")
                warnings.warn(f"building scan bundle on the fly for "
                              f"{batch.ids[i]!r}; prescan the dataset to "
                              "avoid this", RuntimeWarning)
                bu = fallback_bundle(rgb[i], self.config.patch, batch.ids[i])
            if bu.num_patches != self.config.grid_hw[0] * self.config.grid_hw[1]:
                raise ShapeError(f"bundle for {batch.ids[i]!r} has "
                                 f"{bu.num_patches} patches, model grid has "
                                 f"{self.config.grid_hw}")
            out.append(bu)
        return out

    def forward(self, batch: ModalityBatch, training: bool = False,
                strict_bundles: bool = False) -> Tensor:
        cfg = self.config
        self._check_batch(batch)
        bundles = self._resolve_bundles(batch, strict_bundles)
        per_mod = [stream.run(image, bundles, training)
                   for stream, image in zip(self.streams, batch.images)]
        previous = None
        gated_levels = []
        for level in range(cfg.stages):
            refined = [self.freq_filters[level](per_mod[m][level],
                                                training=training)
                       for m in range(cfg.num_modalities)]
            enhanced = self.fusions[level].rgb_enhance(refined[0])
            fused = [self.fusions[level].fuse_modality(enhanced, refined[m],
                                                       m - 1, training)
                     for m in range(1, cfg.num_modalities)]
            total = DualPoolFusion.sum_modalities(enhanced, fused)
            if level == 0:
                blended = total
            else:
                blended = self.gates[level - 1](total, previous, level)
            gated_levels.append(blended)
            previous = blended
        return self.head(gated_levels, (cfg.resolution, cfg.resolution))

    __call__ = forward


def fallback_bundle(image_chw: np.ndarray, p: int, image_id: str) -> ScanBundle:
    """Scan bundle from an image alone: threshold the luminance and keep the
    minority side as the crack guess."""
    lum = np.asarray(image_chw, dtype=np.float64).mean(axis=0)
    t = otsu_threshold(lum)
    fg = lum > t
    if fg.mean() > 0.5:
        fg = lum <= t
    return mask_scan_bundle(BinaryMask(fg.astype(np.uint8), image_id=image_id), p)


# -- accounting ----------------------------------------------------------------

def _walk_modules(module: Module, prefix: str = ""):
    for key, val in vars(module).items():
        name = prefix + key
        if isinstance(val, Module):
            yield name, val
            yield from _walk_modules(val, name + ".")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield f"{name}.{i}", item
                    yield from _walk_modules(item, f"{name}.{i}.")


def param_report(model: CrackSegNet) -> dict:
    """Deterministic per-group parameter counts plus, for every dynamic conv,
    its weight count next to the dense 3x3 conv it replaces."""
    per_group: dict[str, int] = {}
    for name, t in model.named_params().items():
        head = name.split(".")[0]
        per_group[head] = per_group.get(head, 0) + t.data.size
    dynamic = {}
    for path, mod in _walk_modules(model):
        if isinstance(mod, DynamicMultiKernelConv):
            dynamic[path] = {"dynamic": mod.weight_count(),
                             "dense": dense_conv_weight_count(mod.c_in,
                                                              mod.c_out, 3)}
    return {"total": model.param_count(),
            "total_weights": model.param_count(include_bias=False),
            "per_module": per_group,
            "dynamic_conv": dynamic}


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _config_payload(config: NetConfig) -> dict:
    # seed only steers initialization and every parameter is checkpointed,
    # so it is not part of the model's identity
    payload = {k: v for k, v in asdict(config).items() if k != "seed"}
    return json.loads(json.dumps(payload))


def save_checkpoint(model: CrackSegNet, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": _config_payload(model.config),
        "params": {name: {"shape": list(t.data.shape),
                          "values": t.data.ravel().tolist()}
                   for name, t in model.named_params().items()},
        "state": model.named_state(),
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text)


def load_checkpoint(model: CrackSegNet, path) -> None:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload.get('version')!r}, "
                         f"expected {CHECKPOINT_VERSION}")
    want = _config_payload(model.config)
    if payload.get("config") != want:
        raise ValueError(f"checkpoint config does not match the model: "
                         f"{payload.get('config')} vs {want}")
    params = model.named_params()
    saved = payload["params"]
    missing = sorted(set(params) - set(saved))
    extra = sorted(set(saved) - set(params))
    if missing or extra:
        raise ValueError(f"parameter names differ: missing {missing[:3]}, "
                         f"unexpected {extra[:3]}")
    for name, t in params.items():
        arr = np.asarray(saved[name]["values"], dtype=np.float64)
        arr = arr.reshape(saved[name]["shape"])
        if arr.shape != t.data.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
        t.data[...] = arr
    model.load_state("", payload["state"])
