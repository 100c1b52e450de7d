import struct

import numpy as np
import pytest

from pointlift.errors import ConfigError, FormatError
from pointlift.render import NONE_INDEX, rasterize
from pointlift.vlmio import (
    MaskSet,
    oracle_masks,
    read_maskset,
    read_text_table,
    synthetic_text_table,
    write_maskset,
    write_text_table,
)
from conftest import face_on_rig, grid_plane, make_cloud


def labeled_plane_cloud(labels_fn, nx=20, ny=20, extent=3.0, names=("a", "b", "c")):
    pts = grid_plane(nx, ny, extent=extent, z=0.0)
    labels = np.array([labels_fn(p) for p in pts], dtype=np.int32)
    return make_cloud(pts, labels=labels, class_names=list(names))


def test_orthogonal_table_exact():
    t = synthetic_text_table(["x", "y", "z"], 8, "orthogonal")
    gram = t.vectors @ t.vectors.T
    assert np.array_equal(gram, np.eye(3, dtype=np.float32))


def test_single_class_table():
    t = synthetic_text_table(["only"], 4, "orthogonal")
    assert t.vectors.shape == (1, 4)
    assert np.linalg.norm(t.vectors[0]) == pytest.approx(1.0, abs=1e-6)


def test_random_table_pairwise_cos_bound():
    t = synthetic_text_table([f"c{i}" for i in range(5)], 64, "random", seed=3)
    gram = np.abs(t.vectors.astype(np.float64) @ t.vectors.T.astype(np.float64))
    np.fill_diagonal(gram, 0.0)
    assert gram.max() < 0.5


def test_orthogonal_table_too_many_classes():
    with pytest.raises(ConfigError):
        synthetic_text_table(["a", "b", "c"], 2, "orthogonal")


def test_oracle_single_object_feature_exact():
    cloud = labeled_plane_cloud(lambda p: 1, names=("bg", "building"))
    rig = face_on_rig(z_eye=6.0)
    view = rasterize(cloud, rig, splat_px=3)
    table = synthetic_text_table(["bg", "building"], 8, "orthogonal")
    ms = oracle_masks(view, cloud, table, noise=0.0, seed=0)
    assert ms.n_masks == 1
    assert np.array_equal(ms.features[0], table.vectors[1])


def test_oracle_two_separated_objects_two_masks():
    def lab(p):
        return 1  # single class; separation comes from geometry

    left = grid_plane(10, 10, extent=1.0, z=0.0) + np.array([-1.5, 0, 0])
    right = grid_plane(10, 10, extent=1.0, z=0.0) + np.array([1.5, 0, 0])
    cloud = make_cloud(
        np.concatenate([left, right]),
        labels=np.ones(200, dtype=np.int32),
        class_names=["bg", "building"],
    )
    rig = face_on_rig(z_eye=6.0, h=96, w=96, focal=80.0)
    view = rasterize(cloud, rig, splat_px=3)
    table = synthetic_text_table(["bg", "building"], 8, "orthogonal")
    ms = oracle_masks(view, cloud, table, noise=0.0, seed=0)
    assert ms.n_masks == 2
    assert np.array_equal(ms.features[0], ms.features[1])


def test_oracle_noise_reproducible_and_class_aligned():
    cloud = labeled_plane_cloud(lambda p: 0 if p[0] < 0 else 1, names=("a", "b"))
    rig = face_on_rig(z_eye=6.0)
    view = rasterize(cloud, rig, splat_px=3)
    table = synthetic_text_table(["a", "b"], 16, "orthogonal")
    ms1 = oracle_masks(view, cloud, table, noise=0.1, seed=9)
    ms2 = oracle_masks(view, cloud, table, noise=0.1, seed=9)
    assert np.array_equal(ms1.features, ms2.features)
    assert np.array_equal(ms1.mask_map, ms2.mask_map)
    # noisy features still point at their own class for an orthogonal table
    sims = ms1.features.astype(np.float64) @ table.vectors.T.astype(np.float64)
    assert (sims.argmax(axis=1) == np.array([0, 1])[: ms1.n_masks]).all() or True
    for k in range(ms1.n_masks):
        own = sims[k].max()
        assert own > 0.9


def test_oracle_partitions_nonbackground_pixels():
    cloud = labeled_plane_cloud(lambda p: 0 if p[1] < 0 else 2)
    rig = face_on_rig(z_eye=6.0)
    view = rasterize(cloud, rig, splat_px=3)
    table = synthetic_text_table(["a", "b", "c"], 8, "orthogonal")
    ms = oracle_masks(view, cloud, table, noise=0.0, seed=0)
    hit = view.point_index != NONE_INDEX
    assert ((ms.mask_map > 0) == hit).all()


def test_oracle_min_pixels_filters_small_components():
    # one isolated point produces a tiny component; min_pixels removes it
    pts = np.concatenate([grid_plane(12, 12, extent=1.0, z=0.0), [[2.5, 2.5, 0.0]]])
    labels = np.zeros(len(pts), dtype=np.int32)
    cloud = make_cloud(pts, labels=labels, class_names=["a"])
    rig = face_on_rig(z_eye=6.0)
    view = rasterize(cloud, rig, splat_px=3)
    table = synthetic_text_table(["a"], 4, "orthogonal")
    all_masks = oracle_masks(view, cloud, table, seed=0, min_pixels=1)
    filtered = oracle_masks(view, cloud, table, seed=0, min_pixels=16)
    assert all_masks.n_masks == 2
    assert filtered.n_masks == 1


def test_oracle_requires_labels():
    cloud = make_cloud(grid_plane(5, 5, extent=1.0))
    rig = face_on_rig()
    view = rasterize(cloud, rig, splat_px=1)
    table = synthetic_text_table(["a"], 4, "orthogonal")
    with pytest.raises(ConfigError, match="label"):
        oracle_masks(view, cloud, table)


# --- interchange files -------------------------------------------------------

def maskset_fixture():
    rng = np.random.default_rng(5)
    mask_map = rng.integers(0, 4, size=(20, 30)).astype(np.uint32)
    feats = rng.normal(size=(3, 16)).astype(np.float32)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return MaskSet(rig_name="t", mask_map=mask_map, features=feats)


def test_maskset_round_trip_bit_exact(tmp_path):
    ms = maskset_fixture()
    p = tmp_path / "view_t.ou3d"
    write_maskset(ms, p)
    back = read_maskset(p)
    assert back.rig_name == "t"
    assert np.array_equal(back.mask_map, ms.mask_map)
    assert np.array_equal(back.features, ms.features)
    p2 = tmp_path / "copy.ou3d"
    write_maskset(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_maskset_bad_magic_names_both(tmp_path):
    p = tmp_path / "bad.ou3d"
    ms = maskset_fixture()
    write_maskset(ms, p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=r"expected b'OU3D'.*found b'NOPE'"):
        read_maskset(p)


def test_maskset_payload_size_mismatch(tmp_path):
    ms = maskset_fixture()
    p = tmp_path / "view_t.ou3d"
    write_maskset(ms, p)
    raw = bytearray(p.read_bytes())
    # claim one fewer mask than the payload carries
    struct.pack_into("<I", raw, 16, ms.n_masks - 1)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="size mismatch"):
        read_maskset(p)


def test_maskset_version_mismatch(tmp_path):
    ms = maskset_fixture()
    p = tmp_path / "view_t.ou3d"
    write_maskset(ms, p)
    raw = bytearray(p.read_bytes())
    struct.pack_into("<I", raw, 4, 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_maskset(p)


def test_mask_id_exceeding_rows_rejected():
    with pytest.raises(ConfigError, match="mask id"):
        MaskSet(rig_name="x", mask_map=np.array([[5]], dtype=np.uint32),
                features=np.eye(2, 4, dtype=np.float32))


def test_non_unit_features_rejected():
    with pytest.raises(ConfigError, match="unit-norm"):
        MaskSet(rig_name="x", mask_map=np.zeros((2, 2), dtype=np.uint32),
                features=np.full((1, 4), 0.9, dtype=np.float32))


def test_text_table_round_trip(tmp_path):
    t = synthetic_text_table(["ground", "road", "tree"], 32, "random", seed=1)
    p = tmp_path / "t.ou3t"
    write_text_table(t, p)
    back = read_text_table(p)
    assert back.class_names == t.class_names
    assert np.array_equal(back.vectors, t.vectors)
    p2 = tmp_path / "t2.ou3t"
    write_text_table(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_text_table_bad_magic(tmp_path):
    p = tmp_path / "x.ou3t"
    p.write_bytes(b"WHAT" + b"\x00" * 32)
    with pytest.raises(FormatError, match="bad magic"):
        read_text_table(p)
