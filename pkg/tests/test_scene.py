import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointlift.errors import ConfigError, PlyError
from pointlift.scene import (
    Building,
    SceneSpec,
    bounding_box,
    demo_town,
    generate_scene,
    load_cloud,
    scene_areas,
    write_cloud,
)
from conftest import make_cloud

ASCII_PLY = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
1.5 -2.25 0.125 10 20 30
0 0 0 0 0 0
100.5 200.25 -300.75 255 255 255
"""


def test_ascii_parse_bit_equal(tmp_path):
    p = tmp_path / "tri.ply"
    p.write_text(ASCII_PLY)
    cloud = load_cloud(p)
    assert len(cloud) == 3
    expected = np.array(
        [[1.5, -2.25, 0.125], [0.0, 0.0, 0.0], [100.5, 200.25, -300.75]]
    )
    assert np.array_equal(cloud.positions, expected)
    assert np.array_equal(cloud.colors[0], [10, 20, 30])


def test_binary_round_trip_identity(tmp_path):
    rng = np.random.default_rng(3)
    cloud = make_cloud(
        rng.normal(size=(50, 3)) * 100,
        colors=rng.integers(0, 256, size=(50, 3)),
        labels=rng.integers(0, 4, size=50),
        class_names=["a", "b", "c", "d"],
    )
    p = tmp_path / "c.ply"
    write_cloud(cloud, p, binary=True)
    back = load_cloud(p)
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.colors, cloud.colors)
    assert np.array_equal(back.labels, cloud.labels)
    assert back.class_names == cloud.class_names
    # write -> load -> write reproduces the file bytes
    p2 = tmp_path / "c2.ply"
    write_cloud(back, p2, binary=True)
    assert p.read_bytes() == p2.read_bytes()


def test_ascii_round_trip_to_printed_precision(tmp_path):
    rng = np.random.default_rng(4)
    cloud = make_cloud(rng.normal(size=(20, 3)))
    p = tmp_path / "a.ply"
    write_cloud(cloud, p, binary=False)
    back = load_cloud(p)
    # 17 significant digits round-trip float64 exactly
    assert np.array_equal(back.positions, cloud.positions)


def test_missing_z_property_errors(tmp_path):
    text = ASCII_PLY.replace("property float z\n", "")
    p = tmp_path / "noz.ply"
    p.write_text(text)
    with pytest.raises(PlyError, match="'z'"):
        load_cloud(p)


def test_truncated_binary_payload_reports_offset(tmp_path):
    cloud = make_cloud(np.zeros((10, 3)))
    p = tmp_path / "t.ply"
    write_cloud(cloud, p, binary=True)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(PlyError, match="truncated payload at byte"):
        load_cloud(p)


def test_nonfinite_coordinate_reports_element(tmp_path):
    text = ASCII_PLY.replace("0 0 0 0 0 0", "0 nan 0 0 0 0")
    p = tmp_path / "nan.ply"
    p.write_text(text)
    with pytest.raises(PlyError, match="element 1"):
        load_cloud(p)


def test_unknown_property_skipped_with_warning(tmp_path):
    text = ASCII_PLY.replace(
        "property uchar blue\n", "property uchar blue\nproperty float intensity\n"
    ).replace("10 20 30\n", "10 20 30 0.5\n").replace("0 0 0 0 0 0\n", "0 0 0 0 0 0 1.5\n")
    text = text.replace("255 255 255\n", "255 255 255 2.5\n")
    p = tmp_path / "extra.ply"
    p.write_text(text)
    with pytest.warns(UserWarning, match="intensity"):
        cloud = load_cloud(p)
    assert len(cloud) == 3


def test_colors_default_when_absent(tmp_path):
    text = "ply\nformat ascii 1.0\nelement vertex 1\n" \
           "property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"
    p = tmp_path / "plain.ply"
    p.write_text(text)
    cloud = load_cloud(p)
    assert np.array_equal(cloud.colors[0], [128, 128, 128])
    assert cloud.labels is None


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply file\n")
    with pytest.raises(PlyError, match="malformed header"):
        load_cloud(p)


# --- bounding box ----------------------------------------------------------

def test_bbox_unit_cube():
    cloud = make_cloud([[0, 0, 0], [1, 1, 1]])
    box = bounding_box(cloud)
    assert box.origin == (0.0, 0.0, 0.0)
    assert box.extents == (1.0, 1.0, 1.0)
    assert box.center == (0.5, 0.5, 0.5)


def test_bbox_single_point_inflates():
    cloud = make_cloud([[2.0, 3.0, 4.0]])
    with pytest.warns(UserWarning, match="degenerate"):
        box = bounding_box(cloud)
    assert box.extents == (1e-6, 1e-6, 1e-6)


@settings(max_examples=25, deadline=None)
@given(
    dx=st.floats(-100, 100), dy=st.floats(-100, 100), dz=st.floats(-100, 100),
    seed=st.integers(0, 2**16),
)
def test_bbox_translation_equivariant_and_permutation_invariant(dx, dy, dz, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3))
    box = bounding_box(make_cloud(pts))
    shifted = bounding_box(make_cloud(pts + np.array([dx, dy, dz])))
    assert np.allclose(shifted.extents, box.extents)
    assert np.allclose(
        np.array(shifted.origin) - np.array(box.origin), [dx, dy, dz], atol=1e-9
    )
    perm = bounding_box(make_cloud(pts[rng.permutation(len(pts))]))
    assert perm == box


# --- synthetic scenes --------------------------------------------------------

def test_generated_count_matches_area_oracle():
    density = 25.0
    spec = SceneSpec(
        seed=1, density=density, ground=(0.0, 0.0, 10.0, 8.0),
        buildings=[Building(2.0, 2.0, 3.0, 4.0, 5.0)],
    )
    cloud = generate_scene(spec)
    # area oracle: carved ground + 4 walls + roof
    ground_area = 10.0 * 8.0 - 3.0 * 4.0
    building_area = 2 * (3.0 + 4.0) * 5.0 + 3.0 * 4.0
    expected = round(density * ground_area) + round(density * building_area)
    assert abs(len(cloud) - expected) <= 1
    assert np.isclose(scene_areas(spec)["ground"], ground_area)
    assert np.isclose(scene_areas(spec)["building"], building_area)


def test_same_seed_bit_identical():
    spec = demo_town(seed=9, density=5.0)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.colors, b.colors)
    assert np.array_equal(a.labels, b.labels)


def test_disjoint_classes_have_disjoint_boxes():
    from pointlift.scene import Vehicle

    spec = SceneSpec(
        seed=2, density=30.0, ground=None,
        buildings=[Building(0.0, 0.0, 2.0, 2.0, 2.0)],
        vehicles=[Vehicle(10.0, 10.0, 2.0, 2.0, 1.0)],
    )
    cloud = generate_scene(spec)
    b_pts = cloud.positions[cloud.labels == cloud.class_names.index("building")]
    v_pts = cloud.positions[cloud.labels == cloud.class_names.index("vehicle")]
    assert b_pts[:, 0].max() <= 2.0 < 10.0 <= v_pts[:, 0].min()


def test_empty_spec_rejected():
    with pytest.raises(ConfigError, match="empty"):
        generate_scene(SceneSpec(seed=0, density=1.0))


def test_overlapping_footprints_rejected():
    spec = SceneSpec(
        seed=0, density=1.0, ground=(0, 0, 10, 10),
        buildings=[Building(0, 0, 3, 3, 2), Building(2, 2, 3, 3, 2)],
    )
    with pytest.raises(ConfigError, match="overlap"):
        generate_scene(spec)


def test_every_point_labeled_and_colors_distinct():
    cloud = generate_scene(demo_town(seed=3, density=4.0))
    assert cloud.labels is not None and len(np.unique(cloud.labels)) == 5
    per_class_colors = {
        tuple(cloud.colors[cloud.labels == c][0]) for c in np.unique(cloud.labels)
    }
    assert len(per_class_colors) == 5


def test_spec_dict_round_trip():
    spec = demo_town(seed=11, density=7.0)
    back = SceneSpec.from_dict(spec.to_dict())
    assert back == spec


def test_cloud_arrays_frozen():
    cloud = generate_scene(demo_town(seed=1, density=2.0))
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0
    with pytest.raises(ValueError):
        cloud.labels[0] = 1
