"""Command-line entry point: sim / build / eval / query / render / export.

Every command is deterministic given its config and seed. Configuration
comes from a flat YAML file (``--config``) whose keys can be overridden
by flags; ``--print-config`` shows the effective settings and exits.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.
The ``VOXELOX_THREADS`` environment variable caps worker threads (frame
rendering in ``sim``, decode-ahead in ``build``); thread count never
changes output bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import queue
import struct
import sys
import threading
import time
from pathlib import Path

import numpy as np
import yaml

from .association import AssociationConfig, association_log_records
from .errors import ValidationError
from .evaluate import evaluate_map
from .evolution import Codebook, integrate_frame
from .frame_store import read_features, read_manifest, read_sequence
from .query import export_map, load_snapshot, render_mask, retrieve, save_snapshot
from .simulate import (
    NoiseConfig,
    generate_scene,
    load_scene,
    simulate_sequence,
    voxelize_scene,
)
from .voxel_map import VoxelMap

_RENDER_MAGIC = b"VXRENDR\0"

CONFIG_DEFAULTS: dict[str, object] = {
    "resolution": 0.04,
    "geo_weight": 0.5,
    "fea_weight": 0.5,
    "similarity_threshold": 0.4,
    "observed_fraction_floor": 0.05,
    "candidate_scope": "voxel-local",
    "baseline": "probabilistic",
    "iou_threshold": 0.5,
    "seed": 0,
    "objects": 6,
    "frames": 60,
    "embedding_dim": 16,
    "width": 160,
    "height": 120,
    "p_drop": 0.0,
    "p_split": 0.0,
    "p_merge": 0.0,
    "boundary_jitter": 0.0,
    "embedding_noise_sigma": 0.0,
    "depth_noise_sigma": 0.0,
    "gt_mode": "surface",
    "k": 3,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with 2."""

    def error(self, message):
        raise _UsageError(message)


def thread_cap(requested: int) -> int:
    """Clamp a worker-thread request by the VOXELOX_THREADS env var."""
    cap = os.environ.get("VOXELOX_THREADS", "").strip()
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ValidationError(f"VOXELOX_THREADS must be an integer, got {cap!r}")
        if cap_n < 1:
            raise ValidationError(f"VOXELOX_THREADS must be >= 1, got {cap_n}")
        return max(1, min(requested, cap_n))
    return max(1, requested)


def load_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid config ({exc})")
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a flat key-value mapping")
    cfg = {}
    for key, value in doc.items():
        if key not in CONFIG_DEFAULTS:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        cfg[key] = _coerce(key, value, where=path)
    return cfg


def _coerce(key: str, value, where: str):
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: key {key!r} must be a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: key {key!r} must be an integer")
        return int(value)
    if not isinstance(value, str):
        raise ValidationError(f"{where}: key {key!r} must be a string")
    return value


def effective_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, in that order."""
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value, where="command line")
    return cfg


def _maybe_print_config(args, cfg) -> bool:
    if getattr(args, "print_config", False):
        sys.stdout.write(yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False))
        return True
    return False


def _association_config(cfg: dict) -> AssociationConfig:
    return AssociationConfig(
        geo_weight=cfg["geo_weight"],
        fea_weight=cfg["fea_weight"],
        similarity_threshold=cfg["similarity_threshold"],
        observed_fraction_floor=cfg["observed_fraction_floor"],
        candidate_scope=cfg["candidate_scope"],
    )


def _noise_config(cfg: dict) -> NoiseConfig:
    return NoiseConfig(
        p_drop=cfg["p_drop"], p_split=cfg["p_split"], p_merge=cfg["p_merge"],
        boundary_jitter=cfg["boundary_jitter"],
        embedding_noise_sigma=cfg["embedding_noise_sigma"],
        depth_noise_sigma=cfg["depth_noise_sigma"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_sim(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    scene = generate_scene(cfg["seed"], cfg["objects"], cfg["embedding_dim"],
                           n_frames=cfg["frames"], width=cfg["width"],
                           height=cfg["height"])
    threads = thread_cap(args.threads if args.threads else min(4, os.cpu_count() or 1))
    manifest = simulate_sequence(scene, _noise_config(cfg), args.out,
                                 resolution=cfg["resolution"], threads=threads)
    print(manifest)
    return 0


def _prefetch(iterator, depth: int):
    """Decode frames on a background thread, yield them in order."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    _END = object()

    def worker():
        try:
            for item in iterator:
                q.put(item)
            q.put(_END)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is _END:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def cmd_build(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    seq = Path(args.sequence)
    manifest = read_manifest(seq)
    vmap = VoxelMap(resolution=manifest.resolution)
    codebook = Codebook()
    acfg = _association_config(cfg)

    progress_fh = open(args.progress, "w", encoding="utf-8") if args.progress else sys.stderr
    assoc_fh = open(args.log_associations, "w", encoding="utf-8") if args.log_associations else None
    frames = read_sequence(seq, on_warning=lambda msg: print(f"warning: {msg}",
                                                             file=sys.stderr))
    if thread_cap(2) > 1:
        frames = _prefetch(frames, depth=2)

    reports = []
    latencies = []
    try:
        for frame in frames:
            t0 = time.perf_counter()
            report = integrate_frame(vmap, codebook, frame, acfg,
                                     backend=cfg["baseline"],
                                     iou_threshold=cfg["iou_threshold"])
            ms = (time.perf_counter() - t0) * 1000.0
            latencies.append(ms)
            reports.append(report)
            record = report.to_json_dict()
            record["latency_ms"] = round(ms, 3)
            print(json.dumps(record, sort_keys=True), file=progress_fh, flush=True)
            if assoc_fh is not None:
                for rec in association_log_records(report.associations):
                    print(json.dumps(rec, sort_keys=True), file=assoc_fh)
        if latencies:
            summary = {
                "event": "summary",
                "frames": len(latencies),
                "latency_p50_ms": round(float(np.percentile(latencies, 50)), 3),
                "latency_p95_ms": round(float(np.percentile(latencies, 95)), 3),
            }
            print(json.dumps(summary, sort_keys=True), file=progress_fh, flush=True)
    finally:
        if progress_fh is not sys.stderr:
            progress_fh.close()
        if assoc_fh is not None:
            assoc_fh.close()

    out = save_snapshot(vmap, codebook, args.out)
    report_doc = {
        "frames": [r.to_json_dict() for r in reports],
        "summary": {
            "n_frames": len(reports),
            "n_instances": len(codebook),
            "n_voxels": vmap.n_voxels,
            "total_count": vmap.total_count,
        },
    }
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report_doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{out} ({len(reports)} frames, {len(codebook)} instances, "
          f"{vmap.n_voxels} voxels)")
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    vmap, codebook = load_snapshot(args.snapshot)
    seq = Path(args.sequence)
    manifest = read_manifest(seq)
    if abs(manifest.resolution - vmap.resolution) > 1e-12:
        raise ValidationError(
            f"resolution mismatch: snapshot {vmap.resolution} vs "
            f"sequence {manifest.resolution}")
    if not manifest.ground_truth or "scene" not in manifest.ground_truth:
        raise ValidationError(f"{seq}: sequence has no ground-truth scene")
    scene = load_scene(seq / manifest.ground_truth["scene"])
    gt = voxelize_scene(scene, vmap.resolution, mode=cfg["gt_mode"])
    report = evaluate_map(vmap, codebook, gt, class_table=scene.class_table)
    print(report.to_text_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_query(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    _, codebook = load_snapshot(args.snapshot)
    if (args.embedding_file is None) == (args.instance is None):
        raise _UsageError("provide exactly one of --embedding-file or --instance")
    if args.instance is not None:
        if args.instance not in codebook:
            raise ValidationError(f"instance {args.instance} not in codebook")
        embedding = codebook.embedding(args.instance)
    else:
        features = read_features(Path(args.embedding_file))
        if not 0 <= args.embedding_index < features.shape[0]:
            raise ValidationError(
                f"embedding index {args.embedding_index} out of range "
                f"(file has {features.shape[0]} rows)")
        embedding = features[args.embedding_index].astype(np.float64)
    hits = retrieve(codebook, embedding, k=cfg["k"])
    for hit in hits:
        print(f"{hit.rank}\t{hit.instance_id}\t{hit.score:.6f}")
    return 0


def cmd_render(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    vmap, _ = load_snapshot(args.snapshot)
    seq = Path(args.sequence)
    target = None
    for frame in read_sequence(seq):
        if frame.frame_id == args.frame:
            target = frame
            break
    if target is None:
        raise ValidationError(f"{seq}: no frame with id {args.frame}")
    rendered = render_mask(vmap, target.intrinsics, target.pose, target.depth)
    h, w = rendered.labels.shape
    with open(args.out, "wb") as f:
        f.write(_RENDER_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(rendered.labels, "<i4").tobytes())
        f.write(np.ascontiguousarray(rendered.confidence, "<f4").tobytes())
    print(args.out)
    return 0


def cmd_export(args) -> int:
    cfg = effective_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    vmap, codebook = load_snapshot(args.snapshot)
    out = export_map(vmap, codebook, args.out, format=args.format)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="YAML config file (flat keys)")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelox",
                     description="Incremental probabilistic instance voxel mapping")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("sim", help="generate a synthetic noisy sequence")
    p.add_argument("out", help="output sequence directory")
    _add_config_flags(p)
    p.add_argument("--objects", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--p-drop", type=float, dest="p_drop")
    p.add_argument("--p-split", type=float, dest="p_split")
    p.add_argument("--p-merge", type=float, dest="p_merge")
    p.add_argument("--boundary-jitter", type=float, dest="boundary_jitter")
    p.add_argument("--embedding-noise-sigma", type=float, dest="embedding_noise_sigma")
    p.add_argument("--depth-noise-sigma", type=float, dest="depth_noise_sigma")
    p.add_argument("--threads", type=int, default=0,
                   help="render worker threads (capped by VOXELOX_THREADS)")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("build", help="integrate a sequence into a map snapshot")
    p.add_argument("sequence", help="input sequence directory")
    p.add_argument("out", help="output snapshot directory")
    _add_config_flags(p)
    p.add_argument("--geo-weight", type=float, dest="geo_weight")
    p.add_argument("--fea-weight", type=float, dest="fea_weight")
    p.add_argument("--similarity-threshold", type=float, dest="similarity_threshold")
    p.add_argument("--observed-fraction-floor", type=float, dest="observed_fraction_floor")
    p.add_argument("--candidate-scope", choices=["voxel-local", "global"],
                   dest="candidate_scope")
    p.add_argument("--baseline", choices=["probabilistic", "iou"],
                   help="association backend (default probabilistic)")
    p.add_argument("--iou-threshold", type=float, dest="iou_threshold")
    p.add_argument("--progress", metavar="FILE",
                   help="write JSON-lines progress here instead of stderr")
    p.add_argument("--log-associations", metavar="FILE",
                   help="write per-mask association records (JSON lines)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="score a snapshot against sequence ground truth")
    p.add_argument("snapshot", help="snapshot directory from `build`")
    p.add_argument("sequence", help="sequence directory with scene.json ground truth")
    _add_config_flags(p)
    p.add_argument("--gt-mode", choices=["surface", "solid"], dest="gt_mode")
    p.add_argument("--out", metavar="FILE", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="top-k retrieval against the codebook")
    p.add_argument("snapshot")
    _add_config_flags(p)
    p.add_argument("--embedding-file", metavar="FILE",
                   help="embedding-matrix file; rows are query vectors")
    p.add_argument("--embedding-index", type=int, default=0,
                   help="row of --embedding-file to query with (default 0)")
    p.add_argument("--instance", type=int,
                   help="query with this stored instance's own embedding")
    p.add_argument("-k", type=int, dest="k")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("render", help="render map labels into a sequence frame's view")
    p.add_argument("snapshot")
    p.add_argument("sequence")
    _add_config_flags(p)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export", help="export the map as PLY or labeled voxels")
    p.add_argument("snapshot")
    p.add_argument("out", help="output directory")
    _add_config_flags(p)
    p.add_argument("--format", choices=["pointlist", "labeled-voxels"],
                   default="pointlist")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "k", None) is not None and args.k < 1:
            raise _UsageError("k must be >= 1")
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
