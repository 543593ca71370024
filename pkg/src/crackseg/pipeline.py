"""Training pipeline: loss terms, threshold-sweep metrics, synthetic crack
data, dataset PNG I/O, the prescan workflow, and a small decoupled-decay
adaptive trainer with polynomial learning-rate decay."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .net import CrackSegNet, ModalityBatch, save_checkpoint
from .numerics import ShapeError, Tensor, add, astensor, clip, div, log, mul, \
    neg, sub, tmean, tsum
from .scanseq import BinaryMask, ScanBundle, mask_scan_bundle, otsu_threshold

MODALITY_CHANNELS = {"rgb": 3, "depth": 1, "polar": 1}
MODALITY_ORDER = ("rgb", "depth", "polar")


# -- losses ---------------------------------------------------------------------

@dataclass
class LossTerms:
    dice: Tensor
    bce: Tensor
    total: Tensor
    eps: float


def dice_loss(pred, target, eps: float = 1.0) -> Tensor:
    pred, target = astensor(pred), astensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"dice: {pred.data.shape} vs {target.data.shape}")
    inter = tsum(mul(pred, target))
    denom = add(tsum(pred), tsum(target))
    return sub(1.0, div(add(mul(inter, 2.0), eps), add(denom, eps)))


def bce_loss(pred, target) -> Tensor:
    pred, target = astensor(pred), astensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"bce: {pred.data.shape} vs {target.data.shape}")
    p = clip(pred, 1e-7, 1.0 - 1e-7)
    pos = mul(target, log(p))
    negt = mul(sub(1.0, target), log(sub(1.0, p)))
    return neg(tmean(add(pos, negt)))


def loss_terms(pred, target, eps: float = 1.0) -> LossTerms:
    d = dice_loss(pred, target, eps)
    b = bce_loss(pred, target)
    return LossTerms(dice=d, bce=b, total=add(d, b), eps=eps)


# -- metrics --------------------------------------------------------------------

@dataclass
class MetricReport:
    ods: float
    ois: float
    f1: float
    miou: float
    thresholds: np.ndarray

    def rows(self) -> list:
        return [("ods", self.ods), ("ois", self.ois), ("f1", self.f1),
                ("miou", self.miou)]


def default_thresholds() -> np.ndarray:
    return np.arange(1, 100) / 100.0


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    # empty prediction against an empty target is a perfect retrieval
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _image_f1_curve(pred: np.ndarray, target: np.ndarray,
                    thresholds: np.ndarray) -> np.ndarray:
    t = target.astype(bool)
    curve = np.empty(thresholds.size)
    for k, thr in enumerate(thresholds):
        p = pred > thr
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        curve[k] = _f1_from_counts(tp, fp, fn)
    return curve


def _image_miou(pred: np.ndarray, target: np.ndarray, thr: float) -> float:
    p = pred > thr
    t = target.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fg = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    bg = tn / (tn + fp + fn) if tn + fp + fn else 1.0
    return (fg + bg) / 2.0


def compute_metrics(preds: list, targets: list,
                    thresholds: np.ndarray | None = None) -> MetricReport:
    """Macro threshold sweep: ODS maximizes the dataset-mean F1 over one
    shared threshold, OIS averages each image's own best F1, so OIS >= ODS
    holds exactly on the same grid."""
    if not preds:
        raise ValueError("compute_metrics: empty prediction list")
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    thresholds = default_thresholds() if thresholds is None \
        else np.asarray(thresholds, dtype=np.float64)
    curves = np.stack([_image_f1_curve(np.asarray(p), np.asarray(t), thresholds)
                       for p, t in zip(preds, targets)])
    mean_curve = curves.mean(axis=0)
    ods = float(mean_curve.max())
    ois = float(curves.max(axis=1).mean())
    at_half = int(np.argmin(np.abs(thresholds - 0.5)))
    f1 = float(curves[:, at_half].mean())
    miou = float(np.mean([_image_miou(np.asarray(p), np.asarray(t),
                                      thresholds[at_half])
                          for p, t in zip(preds, targets)]))
    return MetricReport(ods=ods, ois=ois, f1=f1, miou=miou,
                        thresholds=thresholds)


# -- synthetic data ---------------------------------------------------------------

@dataclass
class SyntheticCrackSpec:
    resolution: int = 64
    crack_count: tuple = (1, 2)
    length_scale: tuple = (0.5, 1.0)
    turn_sigma: float = 0.35
    width_range: tuple = (3, 5)
    noise: float = 0.05
    depth_offset: float = 0.35
    polar_contrast: float = 0.4
    modalities: tuple = ("rgb", "depth")
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError(f"resolution {self.resolution} too small")
        if self.modalities[0] != "rgb":
            raise ValueError("first modality must be rgb")
        for m in self.modalities:
            if m not in MODALITY_CHANNELS:
                raise ValueError(f"unknown modality {m!r}")

    @property
    def modality_channels(self) -> tuple:
        return tuple(MODALITY_CHANNELS[m] for m in self.modalities)


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation by a k x k square."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    r = k // 2
    for dy in range(-r, k - r):
        for dx in range(-r, k - r):
            ys = slice(max(0, dy), min(h, h + dy))
            yd = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            np.maximum(out[yd, xd], mask[ys, xs], out=out[yd, xd])
    return out


def _skeleton(rng: np.random.Generator, spec: SyntheticCrackSpec) -> np.ndarray:
    res = spec.resolution
    mask = np.zeros((res, res), dtype=np.uint8)
    steps = int(res * rng.uniform(*spec.length_scale))
    y = rng.uniform(0.15 * res, 0.85 * res)
    x = rng.uniform(0.15 * res, 0.85 * res)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    for _ in range(steps):
        theta += rng.normal(0.0, spec.turn_sigma)
        y = float(np.clip(y + np.sin(theta), 0, res - 1))
        x = float(np.clip(x + np.cos(theta), 0, res - 1))
        mask[int(round(y)), int(round(x))] = 1
    return mask


def crack_mask(rng: np.random.Generator, spec: SyntheticCrackSpec) -> np.ndarray:
    lo, hi = spec.crack_count
    count = int(rng.integers(lo, hi + 1))
    mask = np.zeros((spec.resolution,) * 2, dtype=np.uint8)
    for _ in range(count):
        width = int(rng.integers(spec.width_range[0], spec.width_range[1] + 1))
        np.maximum(mask, _dilate(_skeleton(rng, spec), width), out=mask)
    return mask


def _render(rng: np.random.Generator, spec: SyntheticCrackSpec,
            mask: np.ndarray, modality: str) -> np.ndarray:
    res = spec.resolution
    m = mask.astype(np.float64)
    if modality == "rgb":
        base = 0.62 + spec.noise * rng.standard_normal((3, res, res))
        tint = rng.uniform(-0.04, 0.04, (3, 1, 1))
        img = base + tint
        crack = 0.12 + 0.5 * spec.noise * rng.standard_normal((3, res, res))
    elif modality == "depth":
        img = 0.55 + spec.noise * rng.standard_normal((1, res, res))
        crack = 0.55 - spec.depth_offset \
            + 0.5 * spec.noise * rng.standard_normal((1, res, res))
    else:  # polar
        img = 0.5 + spec.noise * rng.standard_normal((1, res, res))
        crack = 0.5 + spec.polar_contrast \
            + 0.5 * spec.noise * rng.standard_normal((1, res, res))
    img = img * (1.0 - m) + crack * m
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticCrackSpec, count: int) -> list:
    """Reproducible image groups: [{id, images: {modality: (C,H,W)}, mask}]."""
    rng = np.random.default_rng(spec.seed)
    groups = []
    for i in range(count):
        mask = crack_mask(rng, spec)
        images = {mod: _render(rng, spec, mask, mod) for mod in spec.modalities}
        groups.append({"id": f"synth{i:04d}", "images": images, "mask": mask})
    return groups


# -- dataset I/O -------------------------------------------------------------------

def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_dataset(groups: list, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for g in groups:
        for mod, img in g["images"].items():
            arr = _quantize(img)
            if arr.shape[0] == 3:
                pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
            else:
                pil = Image.fromarray(arr[0], mode="L")
            pil.save(root / f"{g['id']}_{mod}.png")
        gt = (g["mask"].astype(np.uint8) * 255)
        Image.fromarray(gt, mode="L").save(root / f"{g['id']}_gt.png")


def read_dataset(root) -> list:
    root = Path(root)
    groups = []
    for gt_path in sorted(root.glob("*_gt.png")):
        gid = gt_path.name[:-len("_gt.png")]
        mask = (np.asarray(Image.open(gt_path).convert("L")) > 127).astype(np.uint8)
        images = {}
        for mod in MODALITY_ORDER:
            path = root / f"{gid}_{mod}.png"
            if not path.exists():
                continue
            pil = Image.open(path)
            if MODALITY_CHANNELS[mod] == 3:
                arr = np.asarray(pil.convert("RGB"), dtype=np.float64)
                images[mod] = arr.transpose(2, 0, 1) / 255.0
            else:
                arr = np.asarray(pil.convert("L"), dtype=np.float64)
                images[mod] = arr[None] / 255.0
        groups.append({"id": gid, "images": images, "mask": mask})
    return groups


def group_modalities(groups: list) -> tuple:
    """Modalities present in every group, in canonical order, rgb first."""
    if not groups:
        return ()
    present = set(groups[0]["images"])
    for g in groups[1:]:
        present &= set(g["images"])
    mods = tuple(m for m in MODALITY_ORDER if m in present)
    if not mods or mods[0] != "rgb":
        raise ValueError(f"dataset must include rgb for every group, found "
                         f"{sorted(present)}")
    return mods


# -- prescan -----------------------------------------------------------------------

def group_mask(group: dict, mask_source: str) -> BinaryMask:
    if mask_source == "gt-dilate":
        values = _dilate(group["mask"].astype(np.uint8), 5)
    elif mask_source == "otsu":
        lum = group["images"]["rgb"].mean(axis=0)
        thr = otsu_threshold(lum)
        fg = lum > thr
        if fg.mean() > 0.5:
            fg = lum <= thr
        values = fg.astype(np.uint8)
    else:
        raise ValueError(f"unknown mask source {mask_source!r}")
    return BinaryMask(values, image_id=group["id"])


def prescan(groups: list, mask_source: str, p: int) -> tuple:
    """One scan bundle per image group. Returns (bundles, errors) where
    errors lists groups that could not be processed; the partial cache is
    still usable."""
    bundles: dict[str, ScanBundle] = {}
    errors: list[str] = []
    for g in groups:
        try:
            bundles[g["id"]] = mask_scan_bundle(group_mask(g, mask_source), p)
        except Exception as exc:  # noqa: BLE001 - reported per item
            errors.append(f"{g['id']}: {exc}")
    return bundles, errors


# -- trainer -----------------------------------------------------------------------

@dataclass
class TrainSettings:
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    poly_power: float = 0.9
    seed: int = 0


class AdamW:
    """Decoupled weight decay; moments in float64 like everything else."""

    def __init__(self, params: dict, settings: TrainSettings):
        self.params = params
        self.s = settings
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        s = self.s
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data -= lr * s.weight_decay * p.data
            self.m[k] = s.beta1 * self.m[k] + (1.0 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2)
                                               + s.adam_eps)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / max(total, 1)) ** power


def batch_from_groups(groups: list, modalities: tuple,
                      bundles: dict | None) -> tuple:
    """Stack a list of groups into a ModalityBatch plus the target stack."""
    images = []
    for mod in modalities:
        images.append(np.stack([g["images"][mod] for g in groups]))
    ids = [g["id"] for g in groups]
    blist = None
    if bundles is not None:
        blist = [bundles.get(g["id"]) for g in groups]
    targets = None
    if all("mask" in g for g in groups):
        targets = np.stack([g["mask"].astype(np.float64)[None] for g in groups])
    return ModalityBatch(images=images, ids=ids, bundles=blist), targets


def train(model: CrackSegNet, groups: list, cache: dict | None,
          settings: TrainSettings, log_path, ckpt_path,
          strict_cache: bool = False) -> list:
    """Runs the step loop, writes the loss CSV and final checkpoint, returns
    the logged rows. A non-finite loss aborts after writing the last good
    parameter state."""
    if not groups:
        raise ValueError("train: empty dataset")
    modalities = group_modalities(groups)
    if model.config.modality_channels != tuple(MODALITY_CHANNELS[m]
                                               for m in modalities):
        raise ShapeError(f"model wants channels "
                         f"{model.config.modality_channels}, dataset "
                         f"modalities {modalities}")
    params = model.named_params()
    opt = AdamW(params, settings)
    order_rng = np.random.default_rng(settings.seed)
    order: list[int] = []
    rows = []
    last_good = {k: p.data.copy() for k, p in params.items()}
    for step in range(settings.steps):
        if len(order) < settings.batch_size:
            order.extend(order_rng.permutation(len(groups)).tolist())
        picks = [groups[order.pop(0)] for _ in range(settings.batch_size)]
        batch, targets = batch_from_groups(picks, modalities, cache)
        pred = model(batch, training=True, strict_bundles=strict_cache)
        terms = loss_terms(pred, Tensor(targets), model.config.loss_eps)
        values = (float(terms.total.data), float(terms.dice.data),
                  float(terms.bce.data))
        if not all(np.isfinite(values)):
            for k, p in params.items():
                p.data[...] = last_good[k]
            save_checkpoint(model, ckpt_path)
            _write_log(log_path, rows)
            raise FloatingPointError(f"non-finite loss at step {step}; "
                                     f"last good state saved to {ckpt_path}")
        # snapshot before the update: these params just produced a finite loss
        for k, p in params.items():
            last_good[k][...] = p.data
        for p in params.values():
            p.zero_grad()
        terms.total.backward()
        opt.step(poly_lr(settings.lr, step, settings.steps,
                         settings.poly_power))
        rows.append((step, *values))
    save_checkpoint(model, ckpt_path)
    _write_log(log_path, rows)
    return rows


def _write_log(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_total", "loss_dice", "loss_bce"])
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def predict(model: CrackSegNet, groups: list, cache: dict | None,
            batch_size: int = 4, strict_cache: bool = False) -> list:
    """Per-group probability maps [(id, (H,W) float array)] in dataset order."""
    modalities = group_modalities(groups)
    out = []
    for start in range(0, len(groups), batch_size):
        chunk = groups[start:start + batch_size]
        batch, _ = batch_from_groups(chunk, modalities, cache)
        probs = model(batch, strict_bundles=strict_cache).data[:, 0]
        out.extend((g["id"], probs[i].copy()) for i, g in enumerate(chunk))
    return out
