import json

import numpy as np
import pytest

from voxelox.association import AssociationConfig
from voxelox.errors import SchemaError, ValidationError
from voxelox.evolution import Codebook, integrate_frame
from voxelox.geometry import look_at
from voxelox.query import (
    BACKGROUND,
    RetrievalHit,
    codebook_from_json_dict,
    codebook_to_json_dict,
    export_map,
    instance_color,
    load_snapshot,
    read_labeled_voxels,
    render_mask,
    retrieve,
    save_snapshot,
    semantic_labels,
)
from voxelox.simulate import generate_scene, render_gt_frame
from voxelox.voxel_map import VoxelMap, count_triples

from conftest import make_frame, make_intrinsics, orthogonal_features


def built_map(seed=3, n_objects=4, frames=10):
    scene = generate_scene(seed=seed, n_objects=n_objects, d=8, n_frames=frames)
    vmap = VoxelMap(resolution=0.04)
    cb = Codebook()
    rendered = []
    for i, pose in enumerate(scene.trajectory):
        frame, gt = render_gt_frame(scene, pose, i)
        integrate_frame(vmap, cb, frame)
        rendered.append((frame, gt))
    return scene, vmap, cb, rendered


# ---------------------------------------------------------------------------
# render_mask
# ---------------------------------------------------------------------------


def test_render_all_invalid_depth():
    vmap = VoxelMap()
    intr = make_intrinsics()
    rm = render_mask(vmap, intr, look_at(np.array([1.0, 0, 0]), np.zeros(3)),
                     np.zeros((intr.height, intr.width), np.uint16))
    assert np.all(rm.labels == BACKGROUND)
    assert np.all(rm.confidence == 0.0)


def test_render_shape_mismatch_rejected():
    intr = make_intrinsics()
    with pytest.raises(ValidationError):
        render_mask(VoxelMap(), intr, look_at(np.array([1.0, 0, 0]), np.zeros(3)),
                    np.zeros((intr.height + 1, intr.width), np.uint16))


def test_render_self_consistency_after_one_frame():
    intr = make_intrinsics()
    frame = make_frame(0, [
        dict(u0=6, v0=6, u1=22, v1=22, depth_mm=900),
        dict(u0=34, v0=18, u1=56, v1=40, depth_mm=1400),
    ], intr=intr, dim=4)
    vmap = VoxelMap(resolution=0.04)
    cb = Codebook()
    result = integrate_frame(vmap, cb, frame)
    by_mask = {a.mask_index: a.instance_id for a in result.associations.assignments}
    rm = render_mask(vmap, intr, frame.pose, frame.depth)
    total = agree = 0
    for idx, mask in enumerate(frame.masks):
        rows, cols = mask.pixel_rows_cols(intr.width)
        valid = frame.depth[rows, cols] > 0
        total += int(valid.sum())
        agree += int((rm.labels[rows, cols][valid] == by_mask[idx]).sum())
    assert total > 0
    assert agree / total >= 0.99
    assert np.all((rm.confidence >= 0.0) & (rm.confidence <= 1.0))


def test_render_reproduces_gt_regions():
    scene, vmap, cb, rendered = built_map(seed=6, n_objects=3, frames=12)
    frame, gt = rendered[4]
    rm = render_mask(vmap, scene.intrinsics, frame.pose, frame.depth)
    valid = gt >= 0
    # map instance ids need not equal GT ids; take the majority mapping
    mapping = {}
    for inst in np.unique(gt[valid]):
        labels, counts = np.unique(rm.labels[gt == inst], return_counts=True)
        mapping[inst] = labels[np.argmax(counts)]
    hit = sum(int(np.count_nonzero((gt == inst) & (rm.labels == lab)))
              for inst, lab in mapping.items())
    assert hit / int(valid.sum()) >= 0.95
    assert len(set(mapping.values())) == len(mapping)  # regions stay distinct


def test_render_is_read_only():
    scene, vmap, cb, rendered = built_map(seed=2, n_objects=3, frames=6)
    before = count_triples(vmap)
    for frame, _ in rendered[:3]:
        render_mask(vmap, scene.intrinsics, frame.pose, frame.depth)
    after = count_triples(vmap)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# retrieve
# ---------------------------------------------------------------------------


def test_retrieve_self_query_rank_one():
    cb = Codebook()
    feats = orthogonal_features(4, 8, seed=1).astype(np.float64)
    for g in range(4):
        cb.add(g, feats[g])
    hits = retrieve(cb, feats[2], k=2)
    assert hits[0].instance_id == 2
    assert abs(hits[0].score - 1.0) < 1e-12
    assert hits[0].rank == 1 and hits[1].rank == 2
    assert hits[0].score >= hits[1].score


def test_retrieve_k_larger_than_codebook():
    cb = Codebook()
    feats = orthogonal_features(3, 8, seed=2).astype(np.float64)
    for g in range(3):
        cb.add(g, feats[g])
    assert len(retrieve(cb, feats[0], k=10)) == 3


def test_retrieve_empty_codebook():
    assert retrieve(Codebook(), np.ones(4), k=1) == []


def test_retrieve_orthogonal_fixture_recall():
    cb = Codebook()
    feats = orthogonal_features(6, 16, seed=3).astype(np.float64)
    for g in range(6):
        cb.add(g, feats[g])
    for g in range(6):
        assert retrieve(cb, feats[g], k=1)[0].instance_id == g


def test_retrieve_tie_break_smaller_id():
    cb = Codebook()
    v = np.array([1.0, 0.0, 0.0])
    cb.add(3, v)
    cb.add(1, v)
    cb.add(2, np.array([0.0, 1.0, 0.0]))
    hits = retrieve(cb, v, k=2)
    assert [h.instance_id for h in hits] == [1, 3]


def test_retrieve_scale_invariance():
    feats = orthogonal_features(4, 8, seed=4).astype(np.float64)
    cb1, cb2 = Codebook(), Codebook()
    for g in range(4):
        cb1.add(g, feats[g])
        cb2.add(g, feats[g] * (3.0 + g))
    q = feats[1] + 0.2 * feats[2]
    ids1 = [h.instance_id for h in retrieve(cb1, q, k=4)]
    ids2 = [h.instance_id for h in retrieve(cb2, q * 7.0, k=4)]
    assert ids1 == ids2


def test_retrieve_input_validation():
    cb = Codebook()
    cb.add(0, np.ones(4))
    with pytest.raises(ValidationError):
        retrieve(cb, np.ones(4), k=0)
    with pytest.raises(ValidationError):
        retrieve(cb, np.ones(5), k=1)
    with pytest.raises(ValidationError):
        retrieve(cb, np.zeros(4), k=1)


# ---------------------------------------------------------------------------
# semantic_labels
# ---------------------------------------------------------------------------


def test_semantic_labels_exact_match():
    cb = Codebook()
    table = orthogonal_features(3, 8, seed=5).astype(np.float64)
    cb.add(0, table[2])
    cb.add(1, table[0])
    labels = semantic_labels(cb, [(c, table[c]) for c in range(3)])
    assert labels == {0: 2, 1: 0}


def test_semantic_labels_single_class():
    cb = Codebook()
    rng = np.random.default_rng(0)
    for g in range(4):
        cb.add(g, rng.normal(size=8))
    labels = semantic_labels(cb, [(7, np.ones(8))])
    assert labels == {g: 7 for g in range(4)}


def test_semantic_labels_tie_breaks_smaller_class():
    cb = Codebook()
    v = np.array([1.0, 0.0])
    cb.add(0, v)
    labels = semantic_labels(cb, [(5, v), (2, v)])
    assert labels == {0: 2}


def test_semantic_labels_monte_carlo_accuracy():
    rng = np.random.default_rng(11)
    table = orthogonal_features(8, 16, seed=6).astype(np.float64)
    correct = total = 0
    for trial in range(300):
        cls = int(rng.integers(0, 8))
        cb = Codebook()
        cb.add(0, table[cls] + rng.normal(0, 0.1, 16))
        got = semantic_labels(cb, list(enumerate(table)))[0]
        correct += int(got == cls)
        total += 1
    assert correct / total >= 0.95


def test_semantic_labels_validation():
    cb = Codebook()
    cb.add(0, np.ones(4))
    with pytest.raises(ValidationError):
        semantic_labels(cb, [])
    with pytest.raises(ValidationError):
        semantic_labels(cb, [(0, np.ones(5))])
    with pytest.raises(ValidationError):
        semantic_labels(cb, [(0, np.zeros(4))])


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def test_export_empty_map_valid_ply(tmp_path):
    out = export_map(VoxelMap(), Codebook(), tmp_path / "out", format="pointlist")
    text = (out / "voxels.ply").read_text().splitlines()
    assert text[0] == "ply"
    assert "element vertex 0" in text
    assert text[-1] == "end_header"
    assert json.loads((out / "codebook.json").read_text())["instances"] == []


def test_export_ply_vertex_count(tmp_path):
    scene, vmap, cb, _ = built_map(seed=4, n_objects=3, frames=6)
    out = export_map(vmap, cb, tmp_path / "out", format="pointlist")
    lines = (out / "voxels.ply").read_text().splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    assert n == vmap.n_voxels
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == n
    first = body[0].split()
    assert len(first) == 7
    r, g, b = int(first[3]), int(first[4]), int(first[5])
    assert all(0 <= c <= 255 for c in (r, g, b))


def test_export_labeled_voxels_round_trip(tmp_path):
    scene, vmap, cb, _ = built_map(seed=5, n_objects=4, frames=8)
    out = export_map(vmap, cb, tmp_path / "out", format="labeled-voxels")
    dump = read_labeled_voxels(out / "voxels.bin")
    labels, conf = vmap.argmax_for_keys(dump["keys"])
    np.testing.assert_array_equal(dump["labels"], labels)
    np.testing.assert_allclose(dump["confidence"], conf, atol=1e-6)
    # top-1 equals the argmax entry everywhere
    np.testing.assert_array_equal(dump["top_gamma"][:, 0], labels)
    assert np.all(np.diff(dump["keys"]) > 0)


def test_export_top3_with_overflowed_voxel(tmp_path):
    vmap = VoxelMap(resolution=0.04)
    vmap.register_instances(6)
    key = np.array([42], np.int64)
    # counts: gamma g observed (7 - g) times -> top-3 is 0, 1, 2
    for g in range(7):
        for _ in range(7 - g):
            vmap.increment_batch(key, g)
    out = export_map(vmap, Codebook(), tmp_path / "out", format="labeled-voxels")
    dump = read_labeled_voxels(out / "voxels.bin")
    np.testing.assert_array_equal(dump["top_gamma"][0], [0, 1, 2])
    total = sum(7 - g for g in range(7))
    np.testing.assert_allclose(dump["top_theta"][0],
                               np.array([7, 6, 5]) / total, atol=1e-6)


def test_export_unknown_format(tmp_path):
    with pytest.raises(ValidationError):
        export_map(VoxelMap(), Codebook(), tmp_path / "o", format="mesh")


def test_export_deterministic_bytes(tmp_path):
    scene, vmap, cb, _ = built_map(seed=7, n_objects=3, frames=5)
    a = export_map(vmap, cb, tmp_path / "a", format="labeled-voxels")
    b = export_map(vmap, cb, tmp_path / "b", format="labeled-voxels")
    assert (a / "voxels.bin").read_bytes() == (b / "voxels.bin").read_bytes()
    assert (a / "codebook.json").read_bytes() == (b / "codebook.json").read_bytes()


def test_instance_color_stable_and_spread():
    colors = [instance_color(g) for g in range(10)]
    assert colors == [instance_color(g) for g in range(10)]
    assert len(set(colors)) == 10


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def test_snapshot_round_trip(tmp_path):
    scene, vmap, cb, _ = built_map(seed=9, n_objects=4, frames=8)
    out = save_snapshot(vmap, cb, tmp_path / "snap")
    vmap2, cb2 = load_snapshot(out)
    assert vmap2.resolution == vmap.resolution
    assert vmap2.next_instance_id == vmap.next_instance_id
    for a, b in zip(count_triples(vmap), count_triples(vmap2)):
        np.testing.assert_array_equal(a, b)
    assert cb2.ids() == cb.ids()
    for g in cb.ids():
        ra, rb = cb.get(g), cb2.get(g)
        np.testing.assert_array_equal(ra.embedding, rb.embedding)
        assert ra.weight == rb.weight
        assert ra.caption == rb.caption
        assert ra.caption_weight == rb.caption_weight
        assert ra.argmax_extent == rb.argmax_extent


def test_snapshot_bytes_stable(tmp_path):
    scene, vmap, cb, _ = built_map(seed=10, n_objects=3, frames=5)
    a = save_snapshot(vmap, cb, tmp_path / "a")
    b = save_snapshot(vmap, cb, tmp_path / "b")
    for name in ("meta.json", "counts.bin", "codebook.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_snapshot_rejects_corruption(tmp_path):
    scene, vmap, cb, _ = built_map(seed=11, n_objects=3, frames=4)
    out = save_snapshot(vmap, cb, tmp_path / "snap")
    blob = bytearray((out / "counts.bin").read_bytes())
    blob[0] ^= 0xFF
    (out / "counts.bin").write_bytes(bytes(blob))
    with pytest.raises(SchemaError):
        load_snapshot(out)


def test_snapshot_rejects_truncation(tmp_path):
    scene, vmap, cb, _ = built_map(seed=12, n_objects=3, frames=4)
    out = save_snapshot(vmap, cb, tmp_path / "snap")
    blob = (out / "counts.bin").read_bytes()
    (out / "counts.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(SchemaError):
        load_snapshot(out)


def test_codebook_json_round_trip():
    cb = Codebook()
    feats = orthogonal_features(3, 8, seed=8).astype(np.float64)
    cb.add(0, feats[0], caption="mug", weight=0.8)
    cb.add(2, feats[1])
    cb.fuse(0, feats[2], w=0.4, caption="cup")
    doc = codebook_to_json_dict(cb)
    again = codebook_from_json_dict(json.loads(json.dumps(doc)))
    assert again.ids() == cb.ids()
    for g in cb.ids():
        np.testing.assert_array_equal(again.get(g).embedding, cb.get(g).embedding)
        assert again.get(g).caption == cb.get(g).caption
        assert again.get(g).weight == cb.get(g).weight


def test_codebook_json_rejects_bad_version():
    with pytest.raises(SchemaError):
        codebook_from_json_dict({"version": 2, "instances": []})
