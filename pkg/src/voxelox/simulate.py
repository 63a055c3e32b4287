"""Synthetic desk-scale RGB-D-style scene generator with exact ground truth.

Scenes are floating axis-aligned boxes and spheres in a small workspace,
observed by a camera orbiting the scene on a vertically oscillating
ring. Depth is produced by analytic ray casting (slab test for boxes,
quadratic for spheres), so the depth oracle is exact; ground-truth
instance rasters come from the same ray cast. Masks are the connected
components of the GT raster per instance, carrying the instance's clean
class embedding as the mask feature.

The noise model degrades only the observations, never the ground truth:
masks can be dropped, split in two (over-segmentation), merged with
their nearest neighbor (under-segmentation), morphologically jittered at
the boundary, and their features and the depth raster perturbed with
Gaussian noise. Everything is deterministic given (scene, config, seed).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SchemaError, ValidationError
from .evaluate import GroundTruthMap
from .frame_store import FrameBundle, MaskObservation, write_sequence
from .geometry import CameraIntrinsics, Pose, look_at, pack_keys

_GT_MAGIC = b"VXGTRAS\0"

_RAY_EPS = 1e-9
_NEAR = 1e-6


@dataclass
class BoxObject:
    center: np.ndarray
    half_extents: np.ndarray
    instance_id: int
    class_id: int

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.half_extents, self.center + self.half_extents

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb()
        return np.all((points >= lo) & (points <= hi), axis=1)

    def ray_intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Slab test; returns parametric distance along dirs (inf = miss)."""
        lo, hi = self.aabb()
        safe = np.where(np.abs(dirs) < _RAY_EPS, _RAY_EPS, dirs)
        t1 = (lo - origin) / safe
        t2 = (hi - origin) / safe
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        s = np.where(tmin > _NEAR, tmin, tmax)
        hit = (tmax >= np.maximum(tmin, _NEAR)) & (s > _NEAR)
        return np.where(hit, s, np.inf)

    def cube_touches_surface(self, cube_lo: np.ndarray, cube_hi: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb()
        overlaps = np.all((cube_lo < hi) & (cube_hi > lo), axis=1)
        interior = np.all((cube_lo > lo) & (cube_hi < hi), axis=1)
        return overlaps & ~interior


@dataclass
class SphereObject:
    center: np.ndarray
    radius: float
    instance_id: int
    class_id: int

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.full(3, self.radius)
        return self.center - r, self.center + r

    def contains(self, points: np.ndarray) -> np.ndarray:
        return ((points - self.center) ** 2).sum(axis=1) <= self.radius ** 2

    def ray_intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        s_near = (-b - sq) / (2 * a)
        s_far = (-b + sq) / (2 * a)
        s = np.where(s_near > _NEAR, s_near, s_far)
        return np.where(hit & (s > _NEAR), s, np.inf)

    def cube_touches_surface(self, cube_lo: np.ndarray, cube_hi: np.ndarray) -> np.ndarray:
        # nearest / farthest distance from the sphere center to each cube
        nearest = np.maximum(np.maximum(cube_lo - self.center, self.center - cube_hi), 0.0)
        d_near = np.sqrt((nearest ** 2).sum(axis=1))
        farthest = np.maximum(np.abs(cube_lo - self.center), np.abs(cube_hi - self.center))
        d_far = np.sqrt((farthest ** 2).sum(axis=1))
        return (d_near <= self.radius) & (self.radius <= d_far)


@dataclass
class NoiseConfig:
    """Front-end failure model; all stages independent per mask."""

    p_drop: float = 0.0
    p_split: float = 0.0
    p_merge: float = 0.0
    boundary_jitter: float = 0.0     # pixels
    embedding_noise_sigma: float = 0.0
    depth_noise_sigma: float = 0.0   # meters
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_drop", "p_split", "p_merge"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.boundary_jitter < 0 or self.embedding_noise_sigma < 0 or self.depth_noise_sigma < 0:
            raise ValidationError("noise magnitudes must be non-negative")

    def is_identity(self) -> bool:
        return (self.p_drop == 0 and self.p_split == 0 and self.p_merge == 0
                and self.boundary_jitter == 0 and self.embedding_noise_sigma == 0
                and self.depth_noise_sigma == 0)


@dataclass
class SyntheticScene:
    objects: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    class_table: np.ndarray          # (n_classes, d), rows orthonormal
    class_names: list[str]
    trajectory: list[Pose]
    intrinsics: CameraIntrinsics
    seed: int

    @property
    def embedding_dim(self) -> int:
        return self.class_table.shape[1]

    def class_embedding(self, class_id: int) -> np.ndarray:
        return self.class_table[class_id]


def _orthonormal_rows(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q[:n])


def generate_scene(seed: int, n_objects: int, d: int = 16, *, n_frames: int = 60,
                   width: int = 160, height: int = 120,
                   bounds_half: tuple[float, float, float] = (1.0, 1.0, 0.6)
                   ) -> SyntheticScene:
    """Deterministically generate a packed scene and an orbit trajectory.

    Each object gets its own class (so retrieval ground truth is
    unambiguous); class embeddings are pairwise orthonormal, which
    requires d >= n_objects. Packing that cannot fit within the bounds
    fails after a bounded number of rejection-sampling attempts.
    """
    if n_objects < 1:
        raise ValidationError("n_objects must be >= 1")
    if d < n_objects:
        raise ValidationError(f"embedding dimension {d} < number of classes {n_objects}")
    rng = np.random.default_rng(seed)
    class_table = _orthonormal_rows(n_objects, d, rng)
    class_names = [f"object-{i:02d}" for i in range(n_objects)]

    bounds_hi = np.asarray(bounds_half, np.float64)
    bounds_lo = -bounds_hi
    placed: list = []
    margin = 0.08
    tries = 0
    while len(placed) < n_objects:
        tries += 1
        if tries > 300 * n_objects:
            raise ValidationError(
                f"could not pack {n_objects} objects after {tries} attempts")
        make_box = rng.random() < 0.5
        if make_box:
            half = rng.uniform(0.05, 0.11, size=3)
        else:
            half = np.full(3, rng.uniform(0.05, 0.11))
        lo_c, hi_c = bounds_lo + half + 0.15, bounds_hi - half - 0.15
        if np.any(lo_c >= hi_c):
            raise ValidationError(
                f"bounds {tuple(bounds_half)} too small to place objects")
        center = rng.uniform(lo_c, hi_c)
        ok = True
        for other in placed:
            olo, ohi = other.aabb()
            if np.all(center + half + margin > olo) and np.all(center - half - margin < ohi):
                ok = False
                break
        if not ok:
            continue
        idx = len(placed)
        if make_box:
            placed.append(BoxObject(center=center, half_extents=half,
                                    instance_id=idx, class_id=idx))
        else:
            placed.append(SphereObject(center=center, radius=float(half[0]),
                                       instance_id=idx, class_id=idx))

    centroid = np.mean([o.center for o in placed], axis=0)
    orbit_r = 2.0
    osc = 0.85
    phase = float(rng.uniform(0, 2 * np.pi))
    trajectory = []
    for i in range(n_frames):
        theta = 2 * np.pi * i / n_frames
        eye = centroid + np.array([
            orbit_r * np.cos(theta),
            orbit_r * np.sin(theta),
            osc * np.sin(2.0 * theta + phase),
        ])
        trajectory.append(look_at(eye, centroid))

    f = 0.8 * width
    intr = CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)
    return SyntheticScene(objects=placed, bounds_lo=bounds_lo, bounds_hi=bounds_hi,
                          class_table=class_table, class_names=class_names,
                          trajectory=trajectory, intrinsics=intr, seed=seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_gt_frame(scene: SyntheticScene, pose: Pose, frame_id: int = 0
                    ) -> tuple[FrameBundle, np.ndarray]:
    """Ray-cast one view: (FrameBundle with clean masks, GT instance raster).

    The parametric ray distance equals camera-frame z, so stored depth is
    exactly what back-projection expects. GT raster is int32 with -1 for
    background; masks are the connected components of each instance's GT
    region, in (instance, component) order.
    """
    intr = scene.intrinsics
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([
        (us.reshape(-1) - intr.cx) / intr.fx,
        (vs.reshape(-1) - intr.cy) / intr.fy,
        np.ones(w * h),
    ], axis=1)
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.translation

    best_s = np.full(w * h, np.inf)
    best_inst = np.full(w * h, -1, np.int32)
    for obj in scene.objects:
        s = obj.ray_intersect(origin, dirs_world)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_inst[closer] = obj.instance_id

    depth_mm = np.zeros(w * h, np.uint16)
    hit = np.isfinite(best_s)
    mm = np.round(best_s[hit] * 1000.0)
    mm = np.clip(mm, 1, 65535)
    depth_mm[hit] = mm.astype(np.uint16)
    gt = best_inst.reshape(h, w)
    depth = depth_mm.reshape(h, w)

    masks = []
    eight = np.ones((3, 3), dtype=bool)
    for obj in scene.objects:
        region = gt == obj.instance_id
        if not region.any():
            continue
        labeled, n = ndimage.label(region, structure=eight)
        feature = scene.class_table[obj.class_id].astype(np.float32)
        for comp in range(1, n + 1):
            masks.append(MaskObservation.from_bool_mask(
                labeled == comp, feature, detection_score=1.0,
                caption=scene.class_names[obj.class_id]))
    frame = FrameBundle(frame_id=frame_id, depth=depth, pose=pose,
                        intrinsics=intr, masks=masks)
    return frame, gt


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def _split_mask(mask: MaskObservation, width: int) -> list[MaskObservation]:
    vs, us = mask.pixels // width, mask.pixels % width
    du, dv = us.max() - us.min(), vs.max() - vs.min()
    coord = us if du >= dv else vs
    med = np.median(coord)
    first = coord < med
    if not first.any() or first.all():
        return [mask]
    out = []
    for sel in (first, ~first):
        out.append(MaskObservation(pixels=mask.pixels[sel], feature=mask.feature.copy(),
                                   detection_score=mask.detection_score, caption=mask.caption))
    return out


def _merge_target(masks: list[MaskObservation], i: int, alive: list[bool], width: int) -> int:
    ui, vi = masks[i].pixels % width, masks[i].pixels // width
    ci = np.array([ui.mean(), vi.mean()])
    best, best_d = -1, np.inf
    for j, m in enumerate(masks):
        if j == i or not alive[j]:
            continue
        uj, vj = m.pixels % width, m.pixels // width
        d = np.linalg.norm(ci - np.array([uj.mean(), vj.mean()]))
        if d < best_d:
            best, best_d = j, d
    return best


def perturb(frame: FrameBundle, cfg: NoiseConfig,
            rng: np.random.Generator | None = None) -> FrameBundle:
    """Degrade one frame's observations: drop, split, merge, jitter, noise.

    The all-zero config returns the frame unchanged. Stage order: drop ->
    split -> merge -> boundary jitter -> feature noise -> depth noise.
    """
    if cfg.is_identity():
        return frame
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, frame.frame_id]))
    w, h = frame.intrinsics.width, frame.intrinsics.height
    masks = list(frame.masks)

    if cfg.p_drop > 0:
        masks = [m for m in masks if rng.random() >= cfg.p_drop]

    if cfg.p_split > 0:
        split_out: list[MaskObservation] = []
        for m in masks:
            if rng.random() < cfg.p_split:
                split_out.extend(_split_mask(m, w))
            else:
                split_out.append(m)
        masks = split_out

    if cfg.p_merge > 0 and len(masks) > 1:
        alive = [True] * len(masks)
        merged: list[MaskObservation] = []
        for i in range(len(masks)):
            if not alive[i]:
                continue
            if rng.random() < cfg.p_merge:
                j = _merge_target(masks, i, alive, w)
                if j >= 0:
                    a, b = masks[i], masks[j]
                    big = a if a.pixels.size >= b.pixels.size else b
                    union = np.union1d(a.pixels, b.pixels)
                    merged.append(MaskObservation(
                        pixels=union, feature=big.feature.copy(),
                        detection_score=big.detection_score, caption=big.caption))
                    alive[i] = alive[j] = False
                    continue
            alive[i] = False
            merged.append(masks[i])
        masks = merged

    allow_overlap = frame.allow_overlap
    k = int(round(cfg.boundary_jitter))
    if k > 0:
        allow_overlap = True  # dilation can push masks into each other
        jittered = []
        for m in masks:
            grid = m.to_bool_mask(h, w)
            if rng.random() < 0.5:
                grid = ndimage.binary_erosion(grid, iterations=k)
            else:
                grid = ndimage.binary_dilation(grid, iterations=k)
            if grid.any():
                jittered.append(MaskObservation.from_bool_mask(
                    grid, m.feature.copy(), m.detection_score, m.caption))
        masks = jittered

    if cfg.embedding_noise_sigma > 0:
        noisy = []
        for m in masks:
            f = (m.feature.astype(np.float64)
                 + rng.normal(0.0, cfg.embedding_noise_sigma, m.feature.shape[0]))
            noisy.append(MaskObservation(pixels=m.pixels, feature=f.astype(np.float32),
                                         detection_score=m.detection_score, caption=m.caption))
        masks = noisy

    depth = frame.depth
    if cfg.depth_noise_sigma > 0:
        depth = depth.copy()
        valid = depth > 0
        noise = rng.normal(0.0, cfg.depth_noise_sigma * 1000.0, int(valid.sum()))
        vals = depth[valid].astype(np.float64) + noise
        depth[valid] = np.clip(np.round(vals), 1, 65535).astype(np.uint16)

    return FrameBundle(frame_id=frame.frame_id, depth=depth, pose=frame.pose,
                       intrinsics=frame.intrinsics, masks=masks,
                       allow_overlap=allow_overlap)


# ---------------------------------------------------------------------------
# sequence emission and scene (de)serialization
# ---------------------------------------------------------------------------


def write_gt_raster(path: Path, gt: np.ndarray) -> None:
    h, w = gt.shape
    with open(path, "wb") as f:
        f.write(_GT_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(gt, dtype="<i4").tobytes())


def read_gt_raster(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:8] != _GT_MAGIC:
            raise SchemaError(f"{path}: bad magic for GT raster")
        w, h = struct.unpack("<II", head[8:])
        buf = f.read(4 * w * h)
        if len(buf) != 4 * w * h:
            raise SchemaError(f"{path}: GT raster truncated (field: data)")
        return np.frombuffer(buf, dtype="<i4").reshape(h, w).copy()


def scene_to_dict(scene: SyntheticScene) -> dict:
    objects = []
    for o in scene.objects:
        entry = {"instance_id": o.instance_id, "class_id": o.class_id,
                 "center": [float(x) for x in o.center]}
        if isinstance(o, BoxObject):
            entry["shape"] = "box"
            entry["half_extents"] = [float(x) for x in o.half_extents]
        else:
            entry["shape"] = "sphere"
            entry["radius"] = float(o.radius)
        objects.append(entry)
    return {
        "version": 1,
        "seed": scene.seed,
        "bounds": {"lo": [float(x) for x in scene.bounds_lo],
                   "hi": [float(x) for x in scene.bounds_hi]},
        "intrinsics": scene.intrinsics.to_dict(),
        "classes": [{"class_id": i, "name": scene.class_names[i],
                     "embedding": [float(x) for x in scene.class_table[i]]}
                    for i in range(scene.class_table.shape[0])],
        "objects": objects,
        "trajectory": [[float(x) for x in p.matrix().reshape(-1)] for p in scene.trajectory],
    }


def scene_from_dict(doc: dict) -> SyntheticScene:
    if doc.get("version") != 1:
        raise SchemaError(f"scene: unsupported version {doc.get('version')!r}")
    objects = []
    for entry in doc["objects"]:
        center = np.array(entry["center"], np.float64)
        if entry["shape"] == "box":
            objects.append(BoxObject(center=center,
                                     half_extents=np.array(entry["half_extents"], np.float64),
                                     instance_id=int(entry["instance_id"]),
                                     class_id=int(entry["class_id"])))
        elif entry["shape"] == "sphere":
            objects.append(SphereObject(center=center, radius=float(entry["radius"]),
                                        instance_id=int(entry["instance_id"]),
                                        class_id=int(entry["class_id"])))
        else:
            raise SchemaError(f"scene: unknown shape {entry['shape']!r} (field: objects)")
    classes = sorted(doc["classes"], key=lambda c: c["class_id"])
    table = np.array([c["embedding"] for c in classes], np.float64)
    return SyntheticScene(
        objects=objects,
        bounds_lo=np.array(doc["bounds"]["lo"], np.float64),
        bounds_hi=np.array(doc["bounds"]["hi"], np.float64),
        class_table=table,
        class_names=[c["name"] for c in classes],
        trajectory=[Pose.from_matrix(np.array(row, np.float64).reshape(4, 4))
                    for row in doc["trajectory"]],
        intrinsics=CameraIntrinsics.from_dict(doc["intrinsics"]),
        seed=int(doc.get("seed", 0)),
    )


def save_scene(scene: SyntheticScene, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene), f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(path: str | Path) -> SyntheticScene:
    with open(path, encoding="utf-8") as f:
        return scene_from_dict(json.load(f))


def simulate_sequence(scene: SyntheticScene, noise: NoiseConfig, out_path: str | Path,
                      resolution: float = 0.04, threads: int = 1) -> Path:
    """Render + perturb the whole trajectory into a sequence directory.

    Emits the standard frame_store layout plus ``gt/`` instance rasters
    and ``scene.json``. Rendering is stateless per frame, so it may run
    on a small thread pool; perturbation and writing stay in trajectory
    order, keeping output bytes independent of thread count.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)

    poses = list(enumerate(scene.trajectory))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rendered = list(pool.map(
                lambda item: render_gt_frame(scene, item[1], item[0]), poses))
    else:
        rendered = [render_gt_frame(scene, pose, i) for i, pose in poses]

    frames = []
    for i, (clean, gt) in enumerate(rendered):
        rng = np.random.default_rng(np.random.SeedSequence([noise.seed, i]))
        frames.append(perturb(clean, noise, rng))
        write_gt_raster(out / "gt" / f"{i:06d}.gtr", gt)

    save_scene(scene, out / "scene.json")
    write_sequence(frames, out, resolution=resolution,
                   embedding_dim=scene.embedding_dim,
                   ground_truth={"scene": "scene.json", "rasters": "gt"})
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# ground-truth voxelization
# ---------------------------------------------------------------------------


def voxelize_scene(scene: SyntheticScene, resolution: float,
                   mode: str = "surface") -> GroundTruthMap:
    """Voxelize object geometry at map resolution.

    ``surface`` keeps voxels whose cube touches an object's surface —
    what a depth camera can actually observe; ``solid`` keeps voxels
    whose center lies inside the object.
    """
    if mode not in ("surface", "solid"):
        raise ValidationError(f"unknown GT voxelization mode {mode!r}")
    all_keys: list[np.ndarray] = []
    all_inst: list[np.ndarray] = []
    all_cls: list[np.ndarray] = []
    for obj in scene.objects:
        lo, hi = obj.aabb()
        k_lo = np.floor(lo / resolution).astype(np.int64) - 1
        k_hi = np.floor(hi / resolution).astype(np.int64) + 1
        axes = [np.arange(k_lo[a], k_hi[a] + 1) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
        if mode == "solid":
            centers = (idx + 0.5) * resolution
            keep = obj.contains(centers)
        else:
            cube_lo = idx * resolution
            keep = obj.cube_touches_surface(cube_lo, cube_lo + resolution)
        kept = idx[keep]
        all_keys.append(pack_keys(kept))
        all_inst.append(np.full(kept.shape[0], obj.instance_id, np.int32))
        all_cls.append(np.full(kept.shape[0], obj.class_id, np.int32))
    keys = np.concatenate(all_keys) if all_keys else np.empty(0, np.int64)
    inst = np.concatenate(all_inst) if all_inst else np.empty(0, np.int32)
    cls = np.concatenate(all_cls) if all_cls else np.empty(0, np.int32)
    order = np.argsort(keys)
    return GroundTruthMap(resolution=resolution, keys=keys[order],
                          instance_ids=inst[order], class_ids=cls[order])
