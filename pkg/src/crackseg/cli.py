"""Command-line surface: dataset generation, scan prescan and benchmarking,
toy-scale training, inference, and evaluation. All diagnostics go to stderr;
exit code 0 means no errors."""

import argparse
import ast
import difflib
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .net import CrackSegNet, NetConfig, load_checkpoint
from .numerics import ShapeError
from .pipeline import (MODALITY_CHANNELS, SyntheticCrackSpec, TrainSettings,
                       _quantize, compute_metrics, generate_synthetic,
                       group_modalities, predict, prescan, read_dataset,
                       train, write_dataset)
from .scanseq import (BASELINE_KINDS, BinaryMask, baseline_sequence,
                      fnv1a64, load_cache, mask_scan_bundle,
                      median_latency_ns, save_cache)


class CliError(Exception):
    pass


# -- config overrides ------------------------------------------------------------

_SCOPES = {"model": NetConfig, "train": TrainSettings, "data": SyntheticCrackSpec}


def _known_keys() -> list:
    return [f"{scope}.{f.name}" for scope, cls in _SCOPES.items()
            for f in fields(cls)]


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_overrides(pairs: list) -> dict:
    """--set model.patch=8 style overrides, grouped by scope. Unknown keys
    are rejected with close-match suggestions."""
    out = {scope: {} for scope in _SCOPES}
    known = _known_keys()
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not raw:
            raise CliError(f"override {pair!r} is not key=value")
        if key not in known:
            close = difflib.get_close_matches(key, known, n=3)
            hint = f"; did you mean {', '.join(close)}?" if close else ""
            raise CliError(f"unknown override key {key!r}{hint}")
        scope, _, name = key.partition(".")
        out[scope][name] = _parse_value(raw)
    return out


def _build(cls, seed: int, overrides: dict, **extra):
    kwargs = {"seed": seed, **extra}
    kwargs.update(overrides)
    return cls(**kwargs)


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return f"{fnv1a64(blob.encode()):016x}"


def _model_from_checkpoint(ckpt_path, seed: int, model_overrides: dict):
    """Rebuild the network from the checkpoint's config snapshot. Explicit
    model overrides must agree with the snapshot or the pair is rejected."""
    payload = json.loads(Path(ckpt_path).read_text())
    snapshot = dict(payload["config"])
    if model_overrides:
        wanted = dict(snapshot)
        wanted.update(json.loads(json.dumps(model_overrides)))
        if wanted != snapshot:
            raise CliError(
                f"checkpoint/config mismatch: checkpoint "
                f"{_config_hash(snapshot)} vs requested {_config_hash(wanted)}")
    model = CrackSegNet(NetConfig(seed=seed, **snapshot))
    load_checkpoint(model, ckpt_path)
    return model


def _load_or_build_cache(args, groups, patch: int):
    if args.cache and Path(args.cache).exists():
        bundles, cached_patch = load_cache(args.cache)
        if cached_patch and cached_patch != patch:
            raise CliError(f"cache patch {cached_patch} != model patch {patch}")
        return bundles, []
    bundles, errors = prescan(groups, args.mask_source, patch)
    if args.cache:
        save_cache(bundles, args.cache)
    return bundles, errors


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ov = parse_overrides(args.set)
    spec = _build(SyntheticCrackSpec, args.seed, ov["data"])
    groups = generate_synthetic(spec, args.count)
    write_dataset(groups, args.out)
    print(f"wrote {len(groups)} groups "
          f"({', '.join(spec.modalities)}) to {args.out}")
    return 0


def cmd_prescan(args) -> int:
    ov = parse_overrides(args.set)
    patch = ov["model"].get("patch", NetConfig.patch)
    groups = read_dataset(args.data)
    t0 = time.perf_counter()
    bundles, errors = prescan(groups, args.mask_source, patch)
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    save_cache(bundles, args.cache)
    print(f"prescanned {len(bundles)} groups in {elapsed_ms:.1f} ms")
    for line in errors:
        print(f"error: {line}", file=sys.stderr)
    return 1 if errors else 0


def _is_permutation(indices: np.ndarray, n: int) -> bool:
    return indices.size == n and np.array_equal(np.sort(indices), np.arange(n))


def _bundle_ok(bundle, n: int) -> bool:
    return all(_is_permutation(s.indices, n) for s in
               (bundle.h_tb, bundle.h_bt, bundle.v_tb, bundle.v_bt))


def cmd_bench_scan(args) -> int:
    if args.iters < 100:
        raise CliError(f"need >= 100 iterations for a stable median, "
                       f"got {args.iters}")
    try:
        gh, gw = (int(d) for d in args.grid.lower().split("x"))
    except ValueError:
        raise CliError(f"grid {args.grid!r} is not like 64x64") from None
    rng = np.random.default_rng(args.seed)
    mask = BinaryMask((rng.uniform(0, 1, (gh, gw)) > 0.9).astype(np.uint8),
                      "bench")
    n = gh * gw

    rows = []
    for kind in BASELINE_KINDS:
        ns = median_latency_ns(lambda: baseline_sequence(kind, (gh, gw)),
                               args.iters)
        ok = _bundle_ok(baseline_sequence(kind, (gh, gw)), n)
        rows.append((kind, ns, ok))
    ns = median_latency_ns(lambda: mask_scan_bundle(mask, 1), args.iters)
    rows.append(("MaskGuided", ns, _bundle_ok(mask_scan_bundle(mask, 1), n)))

    # retrieval cost once the cache sits in memory: the consumer validated
    # freshness at load time, so the steady-state access is a dict lookup
    cache = {"bench": mask_scan_bundle(mask, 1)}
    assert cache["bench"].mask_hash == mask.hash_hex
    ns = median_latency_ns(lambda: cache["bench"], args.iters)
    rows.append(("MaskGuided-cached", ns, _bundle_ok(cache["bench"], n)))

    lines = ["strategy,median_ns,permutation"]
    lines += [f"{kind},{ns!r},{'ok' if ok else 'BAD'}"
              for kind, ns, ok in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(rows)} strategy rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    ov = parse_overrides(args.set)
    groups = read_dataset(args.data)
    if not groups:
        raise CliError(f"no dataset groups under {args.data}")
    channels = tuple(MODALITY_CHANNELS[m] for m in group_modalities(groups))
    model = CrackSegNet(_build(NetConfig, args.seed, ov["model"],
                               modality_channels=channels))
    settings = _build(TrainSettings, args.seed, ov["train"])
    bundles, errors = _load_or_build_cache(args, groups, model.config.patch)
    for line in errors:
        print(f"error: {line}", file=sys.stderr)
    log_path = args.out or Path(args.ckpt).with_name("loss.csv")
    rows = train(model, groups, bundles, settings, log_path, args.ckpt,
                 strict_cache=args.strict_cache)
    print(f"trained {len(rows)} steps; total loss "
          f"{rows[0][1]:.4f} -> {rows[-1][1]:.4f}; checkpoint {args.ckpt}")
    return 1 if errors else 0


def _predictions(args, groups):
    ov = parse_overrides(args.set)
    model = _model_from_checkpoint(args.ckpt, args.seed, ov["model"])
    bundles = None
    if args.cache:
        bundles, cached_patch = load_cache(args.cache)
        if cached_patch and cached_patch != model.config.patch:
            raise CliError(f"cache patch {cached_patch} != model patch "
                           f"{model.config.patch}")
    return predict(model, groups, bundles, strict_cache=args.strict_cache)


def cmd_infer(args) -> int:
    groups = read_dataset(args.data)
    if not groups:
        raise CliError(f"no dataset groups under {args.data}")
    preds = _predictions(args, groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, prob in preds:
        Image.fromarray(_quantize(prob), mode="L").save(
            out / f"{image_id}_prob.png")
        Image.fromarray(((prob > 0.5) * np.uint8(255)), mode="L").save(
            out / f"{image_id}_mask.png")
    print(f"wrote {2 * len(preds)} maps to {out}")
    return 0


def cmd_eval(args) -> int:
    groups = read_dataset(args.data)
    if not groups or any("mask" not in g for g in groups):
        raise CliError(f"eval needs labelled groups under {args.data}")
    preds = _predictions(args, groups)
    report = compute_metrics([p for _, p in preds],
                             [g["mask"] for g in groups])
    lines = ["metric,value"]
    lines += [f"{name},{value!r}" for name, value in report.rows()]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"ods={report.ods:.4f} ois={report.ois:.4f} "
          f"f1={report.f1:.4f} miou={report.miou:.4f}")
    return 0


# -- parser ----------------------------------------------------------------------

def _add_common(sub, *, data=False, cache=False, ckpt=False, out=False):
    if data:
        sub.add_argument("--data", required=True, help="dataset directory")
    if cache:
        sub.add_argument("--cache", help="scan cache JSON path")
    if ckpt:
        sub.add_argument("--ckpt", required=True, help="checkpoint JSON path")
    if out:
        sub.add_argument("--out", required=out == "required",
                         help="output path")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="config override, e.g. model.patch=8 (repeatable)")
    sub.add_argument("--mask-source", choices=("gt-dilate", "otsu"),
                     default="gt-dilate", dest="mask_source")
    sub.add_argument("--strict-cache", action="store_true", dest="strict_cache")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackseg",
        description="multimodal crack segmentation with mask-guided scanning")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    sub = subs.add_parser("gen-data", help="write a synthetic PNG dataset")
    sub.add_argument("--count", type=int, default=32)
    _add_common(sub, out="required")
    sub.set_defaults(fn=cmd_gen_data)

    sub = subs.add_parser("prescan", help="build the scan-sequence cache")
    _add_common(sub, data=True)
    sub.add_argument("--cache", required=True, help="scan cache JSON path")
    sub.set_defaults(fn=cmd_prescan)

    sub = subs.add_parser("bench-scan", help="scan-strategy latency table")
    sub.add_argument("--grid", default="64x64")
    sub.add_argument("--iters", type=int, default=1000)
    _add_common(sub, out=True)
    sub.set_defaults(fn=cmd_bench_scan)

    sub = subs.add_parser("train", help="toy-scale training run")
    _add_common(sub, data=True, cache=True, ckpt=True, out=True)
    sub.set_defaults(fn=cmd_train)

    sub = subs.add_parser("infer", help="write probability and mask PNGs")
    _add_common(sub, data=True, cache=True, ckpt=True, out="required")
    sub.set_defaults(fn=cmd_infer)

    sub = subs.add_parser("eval", help="metrics CSV against ground truth")
    _add_common(sub, data=True, cache=True, ckpt=True, out="required")
    sub.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ShapeError, ValueError, KeyError, LookupError,
            FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
