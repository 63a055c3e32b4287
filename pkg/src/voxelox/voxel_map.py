"""Sparse voxel grid of per-voxel instance observation counts.

Each observed voxel stores integer counts alpha[gamma] of how often each
instance was projected onto it; the per-voxel categorical distribution
theta = alpha / sum(alpha) is the posterior-mean instance vector that
association and rendering consume.

Storage is a flat structure-of-arrays keyed by packed int64 voxel keys:
up to four (instance, count) pairs live inline per voxel row, and the
rare voxel that accumulates more distinct instances spills into a
per-row overflow dict. Everything on the per-frame hot path
(:meth:`VoxelMap.increment_batch`, :meth:`VoxelMap.gamma_theta_sums`,
:meth:`VoxelMap.argmax_for_keys`) is vectorized over whole masks; the
dict-returning accessors are conveniences for inspection and tests.

Counts only ever grow (one observation = one count), so the cached
per-row argmax and the per-instance argmax-voxel extents can be
maintained incrementally: an increment can only move a row's argmax to
the incremented instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnknownInstanceError, UnobservedVoxelError, ValidationError
from .geometry import DEFAULT_RESOLUTION, VoxelKey, pack_key, unpack_key, unpack_keys

_SLOTS = 4
_INITIAL_CAPACITY = 1024


@dataclass
class VoxelState:
    """Counts of one voxel: sparse association instance ID -> count >= 1."""

    counts: dict[int, int]


def instance_vector(state: VoxelState) -> dict[int, float]:
    """Posterior-mean instance vector theta = alpha / sum(alpha).

    Raises :class:`UnobservedVoxelError` for an empty state; entries of
    the result are positive and sum to 1 (within float rounding).
    """
    if not state.counts:
        raise UnobservedVoxelError("voxel has no observations")
    total = sum(state.counts.values())
    return {g: c / total for g, c in state.counts.items()}


class VoxelMap:
    """Sparse map from voxel keys to instance observation counts."""

    def __init__(self, resolution: float = DEFAULT_RESOLUTION):
        if resolution <= 0:
            raise ValidationError(f"resolution must be positive, got {resolution!r}")
        self.resolution = float(resolution)
        self._next_id = 0
        self._dir: dict[int, int] = {}
        self._n = 0
        cap = _INITIAL_CAPACITY
        self._keys = np.zeros(cap, np.int64)
        self._totals = np.zeros(cap, np.int64)
        self._slot_gamma = np.full((cap, _SLOTS), -1, np.int32)
        self._slot_count = np.zeros((cap, _SLOTS), np.int64)
        self._argmax_gamma = np.full(cap, -1, np.int32)
        self._argmax_count = np.zeros(cap, np.int64)
        self._has_overflow = np.zeros(cap, bool)
        self._overflow: dict[int, dict[int, int]] = {}
        self._extents = np.zeros(64, np.int64)
        self._grand_total = 0

    # ------------------------------------------------------------------
    # identity / size
    # ------------------------------------------------------------------

    @property
    def next_instance_id(self) -> int:
        return self._next_id

    @property
    def n_voxels(self) -> int:
        return self._n

    @property
    def total_count(self) -> int:
        """Grand total of all counts; equals the number of increments applied."""
        return self._grand_total

    def new_instance_id(self) -> int:
        gid = self._next_id
        self._next_id += 1
        if self._next_id > self._extents.shape[0]:
            grown = np.zeros(max(self._next_id, 2 * self._extents.shape[0]), np.int64)
            grown[: self._extents.shape[0]] = self._extents
            self._extents = grown
        return gid

    def register_instances(self, highest_id: int) -> None:
        """Mark all IDs <= highest_id as minted (snapshot load path)."""
        while self._next_id <= highest_id:
            self.new_instance_id()

    # ------------------------------------------------------------------
    # growth
    # ------------------------------------------------------------------

    def _ensure_capacity(self, n: int) -> None:
        cap = self._keys.shape[0]
        if n <= cap:
            return
        new_cap = cap
        while new_cap < n:
            new_cap *= 2

        def grow(a: np.ndarray, fill) -> np.ndarray:
            shape = (new_cap,) + a.shape[1:]
            out = np.full(shape, fill, a.dtype) if fill is not None else np.zeros(shape, a.dtype)
            out[:cap] = a[:cap]
            return out

        self._keys = grow(self._keys, None)
        self._totals = grow(self._totals, None)
        self._slot_gamma = grow(self._slot_gamma, -1)
        self._slot_count = grow(self._slot_count, None)
        self._argmax_gamma = grow(self._argmax_gamma, -1)
        self._argmax_count = grow(self._argmax_count, None)
        self._has_overflow = grow(self._has_overflow, None)

    # ------------------------------------------------------------------
    # lookups
    # ------------------------------------------------------------------

    def rows_for_keys(self, packed: np.ndarray) -> np.ndarray:
        """Row index per packed key, -1 where the voxel is unobserved."""
        get = self._dir.get
        return np.fromiter((get(k, -1) for k in packed.tolist()), np.int64, count=len(packed))

    def argmax_for_keys(self, packed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per key: (argmax instance ID or -1, max-theta confidence or 0.0)."""
        rows = self.rows_for_keys(packed)
        labels = np.full(packed.shape[0], -1, np.int32)
        conf = np.zeros(packed.shape[0], np.float64)
        present = rows >= 0
        pr = rows[present]
        labels[present] = self._argmax_gamma[pr]
        conf[present] = self._argmax_count[pr] / self._totals[pr]
        return labels, conf

    def gamma_theta_sums(self, packed: np.ndarray) -> tuple[int, dict[int, float]]:
        """Over the given voxel set: (number observed, sum of theta per instance).

        This is the geometric-similarity kernel: dividing a returned sum
        by len(packed) gives the mean of theta[gamma] with unobserved
        voxels contributing zero.
        """
        rows = self.rows_for_keys(packed)
        rows = rows[rows >= 0]
        observed = int(rows.size)
        if observed == 0:
            return 0, {}
        sg = self._slot_gamma[rows]
        sc = self._slot_count[rows]
        inv_tot = 1.0 / self._totals[rows].astype(np.float64)
        valid = sg >= 0
        flat_g = sg[valid].astype(np.int64)
        flat_theta = (sc * inv_tot[:, None])[valid]
        sums = np.bincount(flat_g, weights=flat_theta, minlength=self._next_id)
        ovr = rows[self._has_overflow[rows]]
        for r in ovr.tolist():
            inv = 1.0 / float(self._totals[r])
            for g, c in self._overflow[r].items():
                sums[g] += c * inv
        out = {int(g): float(sums[g]) for g in np.nonzero(sums)[0]}
        return observed, out

    # ------------------------------------------------------------------
    # mutation
    # ------------------------------------------------------------------

    def _check_gamma(self, gamma: int) -> None:
        if not (0 <= gamma < self._next_id):
            raise UnknownInstanceError(
                f"instance {gamma} not minted (next_instance_id={self._next_id})"
            )

    def _update_argmax(self, rows: np.ndarray, new_counts: np.ndarray, gamma: int) -> None:
        amc = self._argmax_count[rows]
        amg = self._argmax_gamma[rows]
        flip = (new_counts > amc) | ((new_counts == amc) & (gamma < amg))
        if not flip.any():
            return
        fr = rows[flip]
        old = amg[flip]
        moved = old != gamma
        if moved.any():
            np.add.at(self._extents, old[moved].astype(np.int64), -1)
            self._extents[gamma] += int(moved.sum())
        self._argmax_gamma[fr] = gamma
        self._argmax_count[fr] = new_counts[flip]

    def increment_batch(self, packed: np.ndarray, gamma: int) -> None:
        """Add one observation of ``gamma`` to every voxel in ``packed``.

        Keys must be unique within the call (masks are deduplicated voxel
        sets); cells are created as needed.
        """
        self._check_gamma(gamma)
        packed = np.asarray(packed, np.int64)
        m = packed.shape[0]
        if m == 0:
            return
        rows = self.rows_for_keys(packed)
        miss = rows < 0

        n_new = int(miss.sum())
        if n_new:
            self._ensure_capacity(self._n + n_new)
            new_rows = np.arange(self._n, self._n + n_new, dtype=np.int64)
            nk = packed[miss]
            self._keys[new_rows] = nk
            self._totals[new_rows] = 1
            self._slot_gamma[new_rows, 0] = gamma
            self._slot_count[new_rows, 0] = 1
            self._argmax_gamma[new_rows] = gamma
            self._argmax_count[new_rows] = 1
            self._n += n_new
            self._extents[gamma] += n_new
            self._dir.update(zip(nk.tolist(), new_rows.tolist()))

        existing = rows[~miss]
        if existing.size:
            sg = self._slot_gamma[existing]
            eq = sg == gamma
            hit = eq.any(axis=1)
            hit_rows = existing[hit]
            if hit_rows.size:
                slots = eq[hit].argmax(axis=1)
                new_counts = self._slot_count[hit_rows, slots] + 1
                self._slot_count[hit_rows, slots] = new_counts
                self._update_argmax(hit_rows, new_counts, gamma)
            miss_rows = existing[~hit]
            if miss_rows.size:
                empty = sg[~hit] == -1
                has_empty = empty.any(axis=1)
                er = miss_rows[has_empty]
                if er.size:
                    eslot = empty[has_empty].argmax(axis=1)
                    self._slot_gamma[er, eslot] = gamma
                    self._slot_count[er, eslot] = 1
                    self._update_argmax(er, np.ones(er.size, np.int64), gamma)
                for r in miss_rows[~has_empty].tolist():
                    # all four inline slots taken by other instances
                    ov = self._overflow.setdefault(r, {})
                    c = ov.get(gamma, 0) + 1
                    ov[gamma] = c
                    self._has_overflow[r] = True
                    self._update_argmax(np.array([r]), np.array([c], np.int64), gamma)
            self._totals[existing] += 1
        self._grand_total += m


# module-level operations mirroring the map's observation contract


def increment(vmap: VoxelMap, key: VoxelKey, gamma: int) -> None:
    """Add a single observation of instance ``gamma`` at ``key``."""
    vmap.increment_batch(np.array([pack_key(key)], np.int64), gamma)


def confidence(vmap: VoxelMap) -> dict[VoxelKey, float]:
    """Per observed voxel, max_gamma theta — always in (0, 1]."""
    n = vmap._n
    keys = unpack_keys(vmap._keys[:n])
    conf = vmap._argmax_count[:n] / vmap._totals[:n]
    return {VoxelKey(*keys[i]): float(conf[i]) for i in range(n)}


def argmax_labels(vmap: VoxelMap) -> dict[VoxelKey, int]:
    """Per observed voxel, the instance maximizing theta (ties: smallest ID)."""
    n = vmap._n
    keys = unpack_keys(vmap._keys[:n])
    am = vmap._argmax_gamma[:n]
    return {VoxelKey(*keys[i]): int(am[i]) for i in range(n)}


def _row_counts(vmap: VoxelMap, row: int) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in range(_SLOTS):
        g = int(vmap._slot_gamma[row, s])
        if g >= 0:
            counts[g] = int(vmap._slot_count[row, s])
    if vmap._has_overflow[row]:
        counts.update(vmap._overflow[row])
    return counts


def _set_row_counts(vmap: VoxelMap, row: int, counts: dict[int, int]) -> None:
    """Rewrite one row's slots/overflow from a counts dict (maintenance path)."""
    items = sorted(counts.items())
    vmap._slot_gamma[row] = -1
    vmap._slot_count[row] = 0
    if row in vmap._overflow:
        del vmap._overflow[row]
    vmap._has_overflow[row] = False
    for i, (g, c) in enumerate(items[:_SLOTS]):
        vmap._slot_gamma[row, i] = g
        vmap._slot_count[row, i] = c
    if len(items) > _SLOTS:
        vmap._overflow[row] = dict(items[_SLOTS:])
        vmap._has_overflow[row] = True
    vmap._totals[row] = sum(counts.values())
    best_g, best_c = -1, 0
    for g, c in items:
        if c > best_c:
            best_g, best_c = g, c
    vmap._argmax_gamma[row] = best_g
    vmap._argmax_count[row] = best_c


def state(vmap: VoxelMap, key: VoxelKey) -> VoxelState:
    """Counts of one voxel; empty state if unobserved."""
    row = vmap._dir.get(pack_key(key), -1)
    if row < 0:
        return VoxelState({})
    return VoxelState(_row_counts(vmap, row))


def merge_instances(vmap: VoxelMap, codebook, src: int, dst: int) -> None:
    """Move all count mass of ``src`` onto ``dst`` and retire ``src``.

    Codebook records are fused by their weights (the same weighted mean
    used for per-observation updates); ``codebook`` may be None when only
    voxel counts need merging. Totals per voxel are conserved.
    """
    if src == dst:
        raise ValidationError("merge_instances requires distinct instance IDs")
    vmap._check_gamma(src)
    vmap._check_gamma(dst)
    n = vmap._n
    in_slots = (vmap._slot_gamma[:n] == src).any(axis=1)
    rows = set(np.nonzero(in_slots)[0].tolist())
    for r, ov in vmap._overflow.items():
        if src in ov:
            rows.add(r)
    for r in rows:
        counts = _row_counts(vmap, r)
        moved = counts.pop(src)
        old_arg = int(vmap._argmax_gamma[r])
        counts[dst] = counts.get(dst, 0) + moved
        _set_row_counts(vmap, r, counts)
        new_arg = int(vmap._argmax_gamma[r])
        if old_arg != new_arg:
            vmap._extents[old_arg] -= 1
            vmap._extents[new_arg] += 1
    if codebook is not None:
        codebook.merge_records(src, dst)


def recount_extents(vmap: VoxelMap) -> dict[int, int]:
    """Recompute per-instance argmax-voxel counts from scratch."""
    am = vmap._argmax_gamma[: vmap._n]
    if am.size == 0:
        return {}
    counts = np.bincount(am.astype(np.int64), minlength=vmap._next_id)
    return {int(g): int(counts[g]) for g in np.nonzero(counts)[0]}


def audit_extents(vmap: VoxelMap) -> None:
    """Raise if the cached extents disagree with a full recount."""
    fresh = recount_extents(vmap)
    cached = {g: int(vmap._extents[g]) for g in range(vmap._next_id) if vmap._extents[g] != 0}
    if fresh != cached:
        raise ValidationError(f"extent cache out of sync: cached={cached}, recount={fresh}")


def extent(vmap: VoxelMap, gamma: int) -> int:
    """Cached count of voxels whose argmax is ``gamma`` (may be 0)."""
    vmap._check_gamma(gamma)
    return int(vmap._extents[gamma])


def count_triples(vmap: VoxelMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (packed key, instance, count) entries sorted by (key, instance).

    The canonical serialization order: independent of insertion history,
    so identical map contents produce identical snapshots.
    """
    n = vmap._n
    sg = vmap._slot_gamma[:n]
    valid = sg >= 0
    row_idx, slot_idx = np.nonzero(valid)
    keys = vmap._keys[:n][row_idx]
    gammas = sg[row_idx, slot_idx].astype(np.int64)
    counts = vmap._slot_count[:n][row_idx, slot_idx]
    if vmap._overflow:
        ok, og, oc = [], [], []
        for r, ov in vmap._overflow.items():
            for g, c in ov.items():
                ok.append(vmap._keys[r])
                og.append(g)
                oc.append(c)
        keys = np.concatenate([keys, np.array(ok, np.int64)])
        gammas = np.concatenate([gammas, np.array(og, np.int64)])
        counts = np.concatenate([counts, np.array(oc, np.int64)])
    order = np.lexsort((gammas, keys))
    return keys[order], gammas[order], counts[order]


def from_triples(resolution: float, keys: np.ndarray, gammas: np.ndarray,
                 counts: np.ndarray, next_instance_id: int) -> VoxelMap:
    """Rebuild a map from serialized (key, instance, count) triples."""
    vmap = VoxelMap(resolution)
    if next_instance_id > 0:
        vmap.register_instances(next_instance_id - 1)
    keys = np.asarray(keys, np.int64)
    gammas = np.asarray(gammas, np.int64)
    counts = np.asarray(counts, np.int64)
    if keys.size == 0:
        return vmap
    if counts.min() < 1:
        raise ValidationError("all serialized counts must be >= 1")
    if gammas.min() < 0 or gammas.max() >= next_instance_id:
        raise ValidationError("serialized instance ID outside minted range")
    order = np.lexsort((gammas, keys))
    keys, gammas, counts = keys[order], gammas[order], counts[order]
    uk, first = np.unique(keys, return_index=True)
    vmap._ensure_capacity(uk.size)
    n = uk.size
    bounds = np.append(first, keys.size)
    vmap._keys[:n] = uk
    vmap._n = n
    vmap._dir = {int(k): i for i, k in enumerate(uk.tolist())}
    totals = np.add.reduceat(counts, first)
    vmap._totals[:n] = totals
    # per-key rank of each triple: 0..(k-1) in (key, gamma) order
    rank = np.arange(keys.size) - np.repeat(first, np.diff(bounds))
    inline = rank < _SLOTS
    row_of = np.repeat(np.arange(n), np.diff(bounds))
    vmap._slot_gamma[row_of[inline], rank[inline]] = gammas[inline].astype(np.int32)
    vmap._slot_count[row_of[inline], rank[inline]] = counts[inline]
    for t in np.nonzero(~inline)[0].tolist():
        r = int(row_of[t])
        vmap._overflow.setdefault(r, {})[int(gammas[t])] = int(counts[t])
        vmap._has_overflow[r] = True
    # argmax per key: highest count, ties to the smallest instance ID
    am_order = np.lexsort((gammas, -counts, keys))
    ak, afirst = np.unique(keys[am_order], return_index=True)
    assert np.array_equal(ak, uk)
    best = am_order[afirst]
    vmap._argmax_gamma[:n] = gammas[best].astype(np.int32)
    vmap._argmax_count[:n] = counts[best]
    ext = np.bincount(gammas[best], minlength=max(next_instance_id, 1))
    vmap._extents[: ext.size] = ext
    vmap._grand_total = int(counts.sum())
    return vmap


def instance_voxel_sets(vmap: VoxelMap) -> dict[int, np.ndarray]:
    """Per instance, the packed keys of voxels whose argmax is that instance."""
    n = vmap._n
    am = vmap._argmax_gamma[:n].astype(np.int64)
    keys = vmap._keys[:n]
    order = np.argsort(am, kind="stable")
    am_sorted = am[order]
    keys_sorted = keys[order]
    out: dict[int, np.ndarray] = {}
    if n == 0:
        return out
    uniq, first = np.unique(am_sorted, return_index=True)
    bounds = np.append(first, n)
    for i, g in enumerate(uniq.tolist()):
        out[int(g)] = np.sort(keys_sorted[bounds[i]: bounds[i + 1]])
    return out
