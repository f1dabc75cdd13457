"""Synthetic data generation and dataset file format."""
import json
import math

import numpy as np
import pytest

from hgnlift import skeleton
from hgnlift.data import (
    ACTIONS,
    CameraView,
    Dataset,
    PoseSample,
    SyntheticGenConfig,
    assert_compatible,
    coarse_mirror_map,
    dataset_arrays,
    forward_kinematics,
    generate_synthetic,
    load_dataset,
    make_pseudo_gt,
    project,
    root_center,
    save_dataset,
    validate_sample,
    _rodrigues,
)
from hgnlift.graphs import build_hierarchy, build_synthetic_body_mesh

N_VERTS = 402


@pytest.fixture(scope="module")
def mesh():
    return build_synthetic_body_mesh(N_VERTS, seed=0)


@pytest.fixture(scope="module")
def hierarchy(mesh):
    return build_hierarchy(mesh.graph, [96, 48], seed=0)


def gen_cfg(n_samples=8, **kw):
    kw.setdefault("n_mesh_vertices", N_VERTS)
    return SyntheticGenConfig(n_samples=n_samples, **kw)


# ---------------------------------------------------------------- config


def test_config_defaults_are_valid():
    cfg = SyntheticGenConfig(n_samples=4)
    assert cfg.seed == 0
    assert len(cfg.bone_lengths) == 16
    assert cfg.noise_std_2d == 0.0


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="n_samples"):
        SyntheticGenConfig(n_samples=0)
    with pytest.raises(ValueError, match="bone lengths must be positive"):
        SyntheticGenConfig(n_samples=1, bone_lengths=(-1.0,) * 16)
    with pytest.raises(ValueError, match="16 bone lengths"):
        SyntheticGenConfig(n_samples=1, bone_lengths=(100.0,) * 4)
    with pytest.raises(ValueError, match="angle ranges"):
        SyntheticGenConfig(n_samples=1, angle_ranges=(-0.1,) * 16)
    with pytest.raises(ValueError, match="angle ranges"):
        SyntheticGenConfig(n_samples=1, angle_ranges=(0.2,) * 15)
    with pytest.raises(ValueError, match="focal length"):
        SyntheticGenConfig(n_samples=1, focal_length=0.0)
    with pytest.raises(ValueError, match="distance range"):
        SyntheticGenConfig(n_samples=1, distance_range=(6000.0, 4000.0))
    with pytest.raises(ValueError, match="noise_std_2d"):
        SyntheticGenConfig(n_samples=1, noise_std_2d=-0.1)
    with pytest.raises(ValueError, match="n_mesh_vertices"):
        SyntheticGenConfig(n_samples=1, n_mesh_vertices=50)


def test_config_rejects_camera_inside_reach():
    # the longest chain (pelvis to wrist) is 1160 mm with default lengths
    with pytest.raises(ValueError, match="does not clear the pose reach"):
        SyntheticGenConfig(n_samples=1, distance_range=(1000.0, 2000.0))


# ---------------------------------------------------------------- kinematics


def test_rodrigues_quarter_turn():
    r = _rodrigues(np.array([0.0, 0.0, 1.0]), math.pi / 2)
    np.testing.assert_allclose(r @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_rodrigues_is_a_rotation():
    rng = np.random.default_rng(3)
    for _ in range(10):
        v = rng.normal(size=3)
        r = _rodrigues(v / np.linalg.norm(v), rng.uniform(-math.pi, math.pi))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_fk_identity_rotations_reproduce_rest_pose():
    eye = [np.eye(3)] * 16
    joints = forward_kinematics(skeleton.BONE_LENGTHS, np.eye(3), eye)
    np.testing.assert_allclose(joints, skeleton.REST_JOINTS, atol=1e-9)


def test_fk_root_rotation_rotates_the_whole_pose():
    rot = _rodrigues(np.array([0.0, 1.0, 0.0]), 0.7)
    eye = [np.eye(3)] * 16
    joints = forward_kinematics(skeleton.BONE_LENGTHS, rot, eye)
    np.testing.assert_allclose(joints, skeleton.REST_JOINTS @ rot.T, atol=1e-9)


def test_fk_scales_linearly_with_bone_lengths():
    eye = [np.eye(3)] * 16
    joints = forward_kinematics(2.0 * skeleton.BONE_LENGTHS, np.eye(3), eye)
    np.testing.assert_allclose(joints, 2.0 * skeleton.REST_JOINTS, atol=1e-9)


def test_fk_preserves_bone_lengths_under_random_rotations():
    rng = np.random.default_rng(11)
    lengths = np.asarray(skeleton.BONE_LENGTHS)
    for _ in range(5):
        rots = []
        for _ in range(16):
            v = rng.normal(size=3)
            rots.append(_rodrigues(v / np.linalg.norm(v), rng.uniform(-1.0, 1.0)))
        joints = forward_kinematics(lengths, np.eye(3), rots)
        got = np.array([np.linalg.norm(joints[c] - joints[p]) for p, c in skeleton.EDGES])
        np.testing.assert_allclose(got, lengths, atol=1e-9)


# ---------------------------------------------------------------- projection


def test_project_known_point():
    pose = np.zeros((17, 3))
    pose[1] = [100.0, 200.0, 50.0]
    cam = CameraView(focal_length=2.0, distance=1000.0)
    got = project(pose, cam)
    np.testing.assert_allclose(got[0], [0.0, 0.0], atol=1e-15)  # pelvis on axis
    np.testing.assert_allclose(got[1], [2.0 * 100.0 / 1050.0, 2.0 * 200.0 / 1050.0])


def test_project_rejects_subject_behind_camera():
    pose = np.zeros((17, 3))
    pose[3, 2] = -500.0
    with pytest.raises(ValueError, match="camera plane"):
        project(pose, CameraView(focal_length=1.0, distance=400.0))


def test_root_center_is_idempotent_and_translation_invariant():
    rng = np.random.default_rng(0)
    j = rng.normal(size=(17, 3))
    centered = root_center(j)
    assert np.all(centered[0] == 0.0)
    np.testing.assert_array_equal(root_center(centered), centered)
    np.testing.assert_allclose(root_center(j + np.array([5.0, -2.0, 9.0])), centered, atol=1e-12)


def test_root_center_handles_batches():
    rng = np.random.default_rng(1)
    j = rng.normal(size=(4, 17, 3))
    centered = root_center(j)
    assert centered.shape == (4, 17, 3)
    assert np.all(centered[:, 0, :] == 0.0)
    np.testing.assert_allclose(centered[2], root_center(j[2]), atol=0)


# ---------------------------------------------------------------- generation


def test_generation_is_deterministic(hierarchy):
    a = generate_synthetic(gen_cfg(seed=5), hierarchy)
    b = generate_synthetic(gen_cfg(seed=5), hierarchy)
    assert a.meta == b.meta
    for sa, sb in zip(a.samples, b.samples):
        np.testing.assert_array_equal(sa.joints2d, sb.joints2d)
        np.testing.assert_array_equal(sa.joints3d, sb.joints3d)
        np.testing.assert_array_equal(sa.mesh_mid, sb.mesh_mid)
        np.testing.assert_array_equal(sa.mesh_top, sb.mesh_top)
        assert (sa.action, sa.subject) == (sb.action, sb.subject)


def test_generation_depends_on_seed(hierarchy):
    a = generate_synthetic(gen_cfg(seed=5), hierarchy)
    b = generate_synthetic(gen_cfg(seed=6), hierarchy)
    assert not np.array_equal(a.samples[0].joints3d, b.samples[0].joints3d)


def test_generated_bone_lengths_match_config(hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=12, seed=2), hierarchy)
    lengths = np.asarray(gen_cfg().bone_lengths)
    for s in ds.samples:
        got = np.array([
            np.linalg.norm(s.joints3d[c] - s.joints3d[p]) for p, c in skeleton.EDGES])
        np.testing.assert_allclose(got, lengths, atol=1e-9)


def test_generated_samples_validate(hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=10, seed=3, noise_std_2d=0.01), hierarchy)
    for s in ds.samples:
        validate_sample(s)
        assert np.all(s.joints3d[skeleton.ROOT] == 0.0)


def test_reprojection_reproduces_clean_joints2d(hierarchy):
    ds = generate_synthetic(gen_cfg(seed=7), hierarchy)
    f = ds.meta["camera"]["focal_length"]
    for s, d in zip(ds.samples, ds.meta["camera"]["distances"]):
        np.testing.assert_array_equal(s.joints2d, project(s.joints3d, CameraView(f, d)))


def test_noise_perturbs_2d_but_not_3d(hierarchy):
    clean = generate_synthetic(gen_cfg(seed=7), hierarchy)
    noisy = generate_synthetic(gen_cfg(seed=7, noise_std_2d=0.02), hierarchy)
    residuals = []
    for sc, sn in zip(clean.samples, noisy.samples):
        np.testing.assert_array_equal(sc.joints3d, sn.joints3d)
        assert not np.array_equal(sc.joints2d, sn.joints2d)
        residuals.append(sn.joints2d - sc.joints2d)
    std = np.std(np.concatenate(residuals))
    assert 0.01 < std < 0.04


def test_mesh_targets_are_a_function_of_joints3d(mesh, hierarchy):
    ds = generate_synthetic(gen_cfg(seed=9), hierarchy)
    for s in ds.samples:
        verts = mesh.skinning @ s.joints3d + mesh.offsets
        top, mid = make_pseudo_gt(verts, hierarchy)
        np.testing.assert_array_equal(s.mesh_top, top)
        np.testing.assert_array_equal(s.mesh_mid, mid)


def test_generation_rejects_foreign_hierarchy(hierarchy):
    # mesh connectivity is seed-free, so only a structural mismatch is detectable
    other_mesh = build_synthetic_body_mesh(250, seed=0)
    other = build_hierarchy(other_mesh.graph, [96, 48], seed=0)
    with pytest.raises(ValueError, match="not built from"):
        generate_synthetic(gen_cfg(), other)
    with pytest.raises(ValueError, match="not built from"):
        generate_synthetic(gen_cfg(n_mesh_vertices=250), hierarchy)


def test_action_and_subject_tags_cycle(hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=10, seed=1), hierarchy)
    names = [a for a, _ in ACTIONS]
    assert [s.action for s in ds.samples[:4]] == names
    assert [s.subject for s in ds.samples[:5]] == ["S1", "S2", "S3", "S4", "S5"]


def test_meta_carries_provenance(hierarchy):
    ds = generate_synthetic(gen_cfg(seed=4), hierarchy)
    assert ds.meta["hierarchy_checksum"] == hierarchy.checksum()
    assert ds.meta["joint_names"] == skeleton.JOINT_NAMES
    assert ds.meta["left_right_pairs"] == [list(p) for p in skeleton.LEFT_RIGHT_PAIRS]
    assert ds.meta["generator"]["seed"] == 4
    lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
    assert ds.meta["mesh_sizes"] == {"mid": lo.graph.n_nodes, "top": hi.graph.n_nodes}
    assert len(ds.meta["camera"]["distances"]) == len(ds)
    assert all(4000.0 <= d <= 6000.0 for d in ds.meta["camera"]["distances"])


def test_self_error_is_zero(hierarchy):
    ds = generate_synthetic(gen_cfg(seed=8), hierarchy)
    for s in ds.samples:
        assert np.mean(np.linalg.norm(s.joints3d - s.joints3d, axis=-1)) == 0.0


# ---------------------------------------------------------------- pseudo ground truth


def test_pseudo_gt_rows_are_cluster_means(hierarchy):
    rng = np.random.default_rng(2)
    verts = rng.normal(size=(N_VERTS, 3))
    top, mid = make_pseudo_gt(verts, hierarchy)
    lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
    assert mid.shape == (lo.graph.n_nodes, 3)
    assert top.shape == (hi.graph.n_nodes, 3)
    for level, pooled in ((lo, mid), (hi, top)):
        for c in range(level.graph.n_nodes):
            members = verts[level.composed_map == c]
            np.testing.assert_allclose(pooled[c], members.mean(axis=0), atol=1e-12)


def test_pseudo_gt_commutes_with_translation(hierarchy):
    rng = np.random.default_rng(4)
    verts = rng.normal(size=(N_VERTS, 3))
    t = np.array([3.0, -1.0, 2.0])
    top, mid = make_pseudo_gt(verts, hierarchy)
    top_t, mid_t = make_pseudo_gt(verts + t, hierarchy)
    np.testing.assert_allclose(top_t, top + t, atol=1e-12)
    np.testing.assert_allclose(mid_t, mid + t, atol=1e-12)


def test_pseudo_gt_accepts_snapshot(hierarchy):
    rng = np.random.default_rng(5)
    verts = rng.normal(size=(N_VERTS, 3))
    a = make_pseudo_gt(verts, hierarchy)
    b = make_pseudo_gt(verts, hierarchy.snapshot())
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_pseudo_gt_rejects_wrong_vertex_count(hierarchy):
    with pytest.raises(ValueError, match="vertices"):
        make_pseudo_gt(np.zeros((N_VERTS - 1, 3)), hierarchy)
    with pytest.raises(ValueError, match=r"\(V, 3\)"):
        make_pseudo_gt(np.zeros((N_VERTS, 2)), hierarchy)


# ---------------------------------------------------------------- mirror lifting


def test_coarse_mirror_map_hand_examples():
    # two clusters, each closed under the mirror: lift succeeds
    got = coarse_mirror_map([1, 0, 3, 2], np.array([0, 0, 1, 1]), 2)
    np.testing.assert_array_equal(got, [0, 1])
    # mirror maps cluster 0 to both 0 and 1: no consistent lift
    assert coarse_mirror_map([1, 2, 0], np.array([0, 0, 1]), 2) is None


def test_coarse_mirror_map_swapping_clusters():
    got = coarse_mirror_map([2, 3, 0, 1], np.array([0, 0, 1, 1]), 2)
    np.testing.assert_array_equal(got, [1, 0])


def test_coarse_mirror_map_on_real_mesh(mesh, hierarchy):
    for sel in hierarchy.selected:
        m = coarse_mirror_map(mesh.mirror_map, sel.composed_map, sel.graph.n_nodes)
        if m is not None:
            np.testing.assert_array_equal(m[m], np.arange(sel.graph.n_nodes))


# ---------------------------------------------------------------- file format


def test_round_trip_is_exact(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=6, seed=13, noise_std_2d=0.01), hierarchy)
    path = tmp_path / "ds.jsonl"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.meta == ds.meta
    assert len(back) == len(ds)
    for sa, sb in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(sa.joints2d, sb.joints2d)
        np.testing.assert_array_equal(sa.joints3d, sb.joints3d)
        np.testing.assert_array_equal(sa.mesh_mid, sb.mesh_mid)
        np.testing.assert_array_equal(sa.mesh_top, sb.mesh_top)
        assert (sa.action, sa.subject) == (sb.action, sb.subject)


def test_round_trip_without_mesh(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=3, seed=1), hierarchy)
    stripped = Dataset(
        samples=[PoseSample(s.joints2d, s.joints3d, None, None, s.action, s.subject)
                 for s in ds.samples],
        meta={"generator": ds.meta["generator"]})
    path = tmp_path / "nomesh.jsonl"
    save_dataset(path, stripped)
    back = load_dataset(path)
    assert all(s.mesh_mid is None and s.mesh_top is None for s in back.samples)


def test_load_rejects_wrong_version(tmp_path):
    path = tmp_path / "v2.jsonl"
    path.write_text(json.dumps({"version": 2, "meta": {}}) + "\n")
    with pytest.raises(ValueError, match="unsupported dataset version"):
        load_dataset(path)


def test_load_rejects_missing_header(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(ValueError, match="empty dataset file"):
        load_dataset(path)
    path.write_text("not json\n")
    with pytest.raises(ValueError, match=":1:"):
        load_dataset(path)


def test_load_reports_malformed_record_line(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=2, seed=0), hierarchy)
    path = tmp_path / "bad.jsonl"
    save_dataset(path, ds)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:40]  # truncate the second record mid-JSON
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r":3: malformed record after 1 good samples"):
        load_dataset(path)


def test_load_reports_truncated_final_record(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=4, seed=0), hierarchy)
    path = tmp_path / "trunc.jsonl"
    save_dataset(path, ds)
    text = path.read_text()
    path.write_text(text[: len(text) - 200])
    with pytest.raises(ValueError, match="after 3 good samples"):
        load_dataset(path)


def test_load_rejects_invalid_sample_values(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=1, seed=0), hierarchy)
    path = tmp_path / "offroot.jsonl"
    shifted = PoseSample(
        ds.samples[0].joints2d, ds.samples[0].joints3d + 1.0, None, None, "a", "s")
    save_dataset(path, Dataset(samples=[shifted], meta={}))
    with pytest.raises(ValueError, match=":2:.*pelvis-rooted"):
        load_dataset(path)


def test_load_rejects_inconsistent_mesh_sizes(tmp_path, hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=2, seed=0), hierarchy)
    a, b = ds.samples
    shrunk = PoseSample(b.joints2d, b.joints3d, b.mesh_mid[:-1], b.mesh_top, b.action, b.subject)
    path = tmp_path / "mixed.jsonl"
    save_dataset(path, Dataset(samples=[a, shrunk], meta={}))
    with pytest.raises(ValueError, match="disagrees"):
        load_dataset(path)


def test_assert_compatible(hierarchy):
    ds = generate_synthetic(gen_cfg(seed=0), hierarchy)
    assert_compatible(ds, hierarchy)
    assert_compatible(Dataset(samples=[], meta={}), hierarchy)  # no recorded checksum
    ds.meta["hierarchy_checksum"] = "0" * 64
    with pytest.raises(ValueError, match="generated for hierarchy"):
        assert_compatible(ds, hierarchy)


# ---------------------------------------------------------------- arrays


def test_dataset_arrays_shapes_and_mask(hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=5, seed=2), hierarchy)
    x2d, y3d, mesh_mid, mesh_top, mask = dataset_arrays(ds)
    assert x2d.shape == (5, 17, 2) and y3d.shape == (5, 17, 3)
    assert mesh_mid.shape[0] == 5 and mesh_top.shape[0] == 5
    assert mask.all()
    s = ds.samples[3]
    ds.samples[3] = PoseSample(s.joints2d, s.joints3d, None, None, s.action, s.subject)
    x2d, y3d, mesh_mid, mesh_top, mask = dataset_arrays(ds)
    assert not mask[3] and mask.sum() == 4
    assert np.all(mesh_mid[3] == 0.0)


def test_dataset_arrays_without_mesh(hierarchy):
    ds = generate_synthetic(gen_cfg(n_samples=3, seed=2), hierarchy)
    bare = Dataset(
        samples=[PoseSample(s.joints2d, s.joints3d) for s in ds.samples], meta={})
    x2d, y3d, mesh_mid, mesh_top, mask = dataset_arrays(bare)
    assert x2d.shape == (3, 17, 2)
    assert mesh_mid is None and mesh_top is None and mask is None
