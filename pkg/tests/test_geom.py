import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointedge.geom import (
    PointCloud,
    PointCloudParseError,
    Primitive,
    SceneSpec,
    farthest_point_sample,
    knn,
    knn_with_self,
    load_point_cloud,
    random_scene_spec,
    read_scene_spec,
    sample_block,
    save_point_cloud,
    synth_scene,
    tile_blocks,
)


def brute_knn(q, r, k):
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    idx = np.array([sorted(range(len(r)), key=lambda j: (d2[i, j], j))[:k] for i in range(len(q))])
    return idx, np.sqrt(np.take_along_axis(d2, idx, axis=1))


def brute_fps(pos, m, start):
    picked = [start]
    while len(picked) < m:
        best, best_d = None, -1.0
        for j in range(len(pos)):
            if j in picked:
                continue
            d = min(np.sum((pos[j] - pos[p]) ** 2) for p in picked)
            if d > best_d:
                best, best_d = j, d
        picked.append(best)
    return picked


def cloud_from(pos, labels=None, num_classes=4):
    pos = np.asarray(pos, float)
    feats = np.concatenate([pos, np.full_like(pos, 0.5)], axis=1)
    return PointCloud(pos, feats, labels, num_classes)


# -- loading -----------------------------------------------------------------


def test_load_single_point(tmp_path):
    f = tmp_path / "one.txt"
    f.write_text("0 0 0 255 0 0 2\n")
    pc = load_point_cloud(f, "scannet-6d", num_classes=4)
    np.testing.assert_array_equal(pc.positions, [[0, 0, 0]])
    np.testing.assert_array_equal(pc.features, [[0, 0, 0, 1, 0, 0]])
    np.testing.assert_array_equal(pc.labels, [2])


def test_load_empty_file(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("# only a comment\n")
    with pytest.raises(PointCloudParseError, match="no points"):
        load_point_cloud(f)


def test_load_reports_bad_line(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("0 0 0 1 2 3 0\n1 1 oops 1 2 3 0\n2 2 2 1 2 3 0\n")
    with pytest.raises(PointCloudParseError, match="line 2"):
        load_point_cloud(f, num_classes=4)


@pytest.mark.parametrize(
    "body, message",
    [
        ("0 0 0 300 0 0 1\n", "0-255"),
        ("0 0 0 1 2 3 1\n1 1 1 1 2 3\n", "label column"),
        ("0 0 0 1 2\n", "6 or 7 fields"),
        ("nan 0 0 1 2 3\n", "non-finite"),
    ],
)
def test_load_rejects(tmp_path, body, message):
    f = tmp_path / "x.txt"
    f.write_text(body)
    with pytest.raises(PointCloudParseError, match=message):
        load_point_cloud(f, num_classes=4)


def test_load_label_out_of_range(tmp_path):
    f = tmp_path / "x.txt"
    f.write_text("0 0 0 1 2 3 7\n")
    with pytest.raises(ValueError, match="out of range"):
        load_point_cloud(f, num_classes=4)


def test_nine_dim_schema_adds_room_position(tmp_path):
    f = tmp_path / "x.txt"
    f.write_text("0 0 0 0 0 0\n2 4 1 255 255 255\n1 2 0.5 0 0 0\n")
    pc = load_point_cloud(f, "s3dis-9d")
    assert pc.features.shape == (3, 9)
    np.testing.assert_allclose(pc.features[2, 6:], [0.5, 0.5, 0.5])
    assert pc.labels is None


def test_save_load_roundtrip(tmp_path):
    spec = random_scene_spec(1, points_per_class=20)
    pc = synth_scene(spec, 3)
    f = tmp_path / "scene.txt"
    save_point_cloud(pc, f)
    back = load_point_cloud(f, num_classes=4)
    np.testing.assert_allclose(back.positions, pc.positions, atol=1e-6)
    np.testing.assert_allclose(back.rgb, pc.rgb, atol=0.5 / 255 + 1e-12)
    np.testing.assert_array_equal(back.labels, pc.labels)


def test_pointcloud_validates_shapes():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 6)), None, 4)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros((2, 6)), np.array([0, 4]), 4)


# -- synthetic scenes ----------------------------------------------------------


def test_synth_budgets_exact():
    spec = SceneSpec(
        [Primitive((0, 0, 0), (1, 1, 1), 0, 256), Primitive((2, 0, 0), (3, 1, 1), 1, 256)], num_classes=2
    )
    pc = synth_scene(spec, 7)
    assert len(pc) == 512
    np.testing.assert_array_equal(np.bincount(pc.labels), [256, 256])


def test_synth_deterministic():
    spec = random_scene_spec(4)
    a, b = synth_scene(spec, 11), synth_scene(spec, 11)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.features.tobytes() == b.features.tobytes()


def test_synth_overlapping_boxes_labeled_by_owner():
    p0 = Primitive((0, 0, 0), (1, 1, 1), 0, 300)
    p1 = Primitive((0.5, 0.5, 0.5), (1.5, 1.5, 1.5), 1, 300)
    pc = synth_scene(SceneSpec([p0, p1], num_classes=2), 0)
    assert np.all(p0.contains_surface_point(pc.positions[pc.labels == 0]))
    assert np.all(p1.contains_surface_point(pc.positions[pc.labels == 1]))


def test_synth_zero_budget():
    with pytest.raises(ValueError):
        synth_scene(SceneSpec([Primitive((0, 0, 0), (1, 1, 0), 0, 0)], 1), 0)


def test_synth_plane_points_lie_on_plane():
    pc = synth_scene(SceneSpec([Primitive((0, 0, 0.3), (2, 1, 0.3), 0, 50)], 1), 0)
    np.testing.assert_array_equal(pc.positions[:, 2], 0.3)
    assert pc.positions[:, 0].max() <= 2 and pc.positions[:, 1].max() <= 1


def test_read_scene_spec(tmp_path):
    f = tmp_path / "scene.ini"
    f.write_text(
        "[scene]\nnum_classes = 3\ncolor_noise = 0.1\n\n"
        "[primitive floor]\nmin = 0 0 0\nmax = 2 2 0\nlabel = 0\npoints = 40\n\n"
        "[primitive box]\nmin = 0.5 0.5 0\nmax = 1 1 1\nlabel = 2\npoints = 10\ncolor = 1 0 0\n"
    )
    spec = read_scene_spec(f)
    assert spec.num_classes == 3 and spec.total_points == 50
    assert spec.primitives[1].color == (1.0, 0.0, 0.0)


def test_rgb_channels_in_unit_range():
    pc = synth_scene(random_scene_spec(0, color_noise=0.5), 0)
    assert pc.rgb.min() >= 0 and pc.rgb.max() <= 1


# -- blocks ----------------------------------------------------------------------


def test_block_covering_cloud_is_permutation():
    rng = np.random.default_rng(0)
    pc = cloud_from(rng.uniform(0, 0.5, (40, 3)))
    blk = sample_block(pc, 0.8, 0.1, 40, rng_seed=1)
    assert sorted(blk.source_index.tolist()) == list(range(40))


def test_block_upsamples_small_cloud():
    pc = cloud_from(np.random.default_rng(0).uniform(0, 0.3, (10, 3)))
    blk = sample_block(pc, 0.8, 0.1, 4096, rng_seed=2)
    assert len(blk) == 4096
    assert set(blk.source_index.tolist()) == set(range(10))
    np.testing.assert_array_equal(blk.positions, pc.positions[blk.source_index])


def test_block_excludes_far_cluster():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 0.3, (50, 3))
    b = a + [5, 0, 0]
    pc = cloud_from(np.vstack([a, b]))
    for seed in range(5):
        blk = sample_block(pc, 0.8, 0.1, 64, rng_seed=seed)
        src = blk.source_index
        assert np.all(src < 50) or np.all(src >= 50)


def test_block_deterministic_and_centered_xyz():
    pc = synth_scene(random_scene_spec(2), 0)
    a = sample_block(pc, 0.8, 0.1, 128, rng_seed=5)
    b = sample_block(pc, 0.8, 0.1, 128, rng_seed=5)
    np.testing.assert_array_equal(a.source_index, b.source_index)
    # feature xyz are shifted in xy only; positions stay in room coordinates
    shift = a.positions - a.features[:, :3]
    np.testing.assert_allclose(shift - shift[0], 0, atol=1e-12)
    assert shift[0, 2] == 0


def test_block_nine_dim_keeps_room_normalization():
    spec = random_scene_spec(0, schema="s3dis-9d")
    pc = synth_scene(spec, 0)
    blk = sample_block(pc, 0.4, 0.05, 64, rng_seed=0)
    np.testing.assert_allclose(blk.features[:, 6:], pc.features[blk.source_index, 6:])


def test_tile_blocks_cover_everything():
    pc = synth_scene(random_scene_spec(3, extent=2.0), 0)
    blocks = tile_blocks(pc, 0.8, 0.1, 128, rng_seed=0)
    seen = np.zeros(len(pc), bool)
    for b in blocks:
        assert len(b) == 128
        seen[b.source_index] = True
    assert seen.all()


# -- farthest point sampling ----------------------------------------------------


def test_fps_collinear_tie_break():
    pos = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    np.testing.assert_array_equal(farthest_point_sample(pos, 3, 0), [0, 9, 4])


def test_fps_single_and_full():
    pos = np.random.default_rng(1).normal(size=(20, 3))
    np.testing.assert_array_equal(farthest_point_sample(pos, 1, 7), [7])
    assert sorted(farthest_point_sample(pos, 20).tolist()) == list(range(20))


def test_fps_errors():
    pos = np.zeros((4, 3))
    with pytest.raises(ValueError):
        farthest_point_sample(pos, 5)
    with pytest.raises(ValueError):
        farthest_point_sample(pos, 2, start_index=4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10_000))
def test_fps_matches_greedy_oracle(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 4, (n, 3)).astype(float)  # coarse grid forces ties
    m = int(rng.integers(1, n + 1))
    start = int(rng.integers(n))
    got = farthest_point_sample(pos, m, start)
    assert len(set(got.tolist())) == m
    if len(np.unique(pos, axis=0)) == n:
        assert got.tolist() == brute_fps(pos, m, start)


def test_fps_covering_radius_non_increasing():
    pos = np.random.default_rng(3).uniform(size=(60, 3))
    order = farthest_point_sample(pos, 60)
    prev = np.inf
    for m in range(2, 61):
        sub = pos[order[:m]]
        d = np.sqrt(((sub[:, None] - sub[None]) ** 2).sum(-1))
        d[np.diag_indices(m)] = np.inf
        assert d.min() <= prev + 1e-12
        prev = d.min()


# -- kNN ------------------------------------------------------------------------


def test_knn_self_is_nearest():
    pos = np.random.default_rng(0).normal(size=(30, 3))
    t = knn(pos, pos, 1)
    np.testing.assert_array_equal(t.indices[:, 0], np.arange(30))
    np.testing.assert_array_equal(t.distances, 0)


def test_knn_tie_prefers_lower_index():
    ref = np.zeros((6, 3))
    ref[2] = [1, 0, 0]
    ref[5] = [-1, 0, 0]
    ref[[0, 1, 3, 4]] = 10 + np.arange(4)[:, None]
    t = knn(np.zeros((1, 3)), ref, 1)
    assert t.indices[0, 0] == 2
    assert t.query_count == 1 and t.k == 1


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn(np.zeros((1, 3)), np.zeros((3, 3)), 4)


def test_knn_five_points_oracle():
    pos = np.random.default_rng(5).normal(size=(5, 3))
    t = knn(pos, pos, 3)
    idx, dist = brute_knn(pos, pos, 3)
    np.testing.assert_array_equal(t.indices, idx)
    np.testing.assert_allclose(t.distances, dist, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 60), st.integers(0, 10_000), st.booleans())
def test_knn_matches_oracle(m, r, seed, grid):
    rng = np.random.default_rng(seed)
    q = rng.integers(0, 3, (m, 3)).astype(float) if grid else rng.normal(size=(m, 3))
    ref = rng.integers(0, 3, (r, 3)).astype(float) if grid else rng.normal(size=(r, 3))
    k = int(rng.integers(1, r + 1))
    t = knn(q, ref, k, chunk=7)
    idx, dist = brute_knn(q, ref, k)
    np.testing.assert_array_equal(t.indices, idx)
    np.testing.assert_allclose(t.distances, dist, atol=1e-12)
    assert np.all(np.diff(t.distances, axis=1) >= 0)


def test_knn_with_self_duplicates():
    pos = np.zeros((5, 3))
    idx = knn_with_self(pos, 2)
    for i in range(5):
        assert i in idx[i]
