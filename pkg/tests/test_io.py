import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from undercanopy.errors import EmptyCloudError, FormatError
from undercanopy.evaluation import ate_pos
from undercanopy.forest import DriftModel, generate_forest, perturb_trajectory, straight_pass
from undercanopy.io import (
    PointCloud,
    ReferenceTree,
    Trajectory,
    load_point_cloud,
    load_reference_trees,
    load_trajectory,
    save_point_cloud,
    save_reference_trees,
    save_trajectory,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- point clouds


def test_two_point_file(tmp_path):
    p = write(tmp_path, "a.xyzt", "0 0 1.3 0.0\n0.1 0 1.3 0.2\n")
    c = load_point_cloud(p)
    assert len(c) == 2
    assert np.array_equal(c.t, [0.0, 0.2])
    assert c.temporal


def test_shuffled_timestamps_sorted(tmp_path):
    p = write(tmp_path, "a.xyzt", "# x y z t\n1 0 0 3\n2 0 0 1\n3 0 0 2\n4 0 0 1\n")
    c = load_point_cloud(p)
    assert np.array_equal(c.t, [1, 1, 2, 3])
    # stable: the two t=1 points keep file order
    assert np.array_equal(c.xyz[:, 0], [2, 4, 3, 1])


def test_malformed_record_reports_line(tmp_path):
    p = write(tmp_path, "a.xyzt", "# header\n0 0 0 0\n0 0 x 1\n")
    with pytest.raises(FormatError) as err:
        load_point_cloud(p)
    assert err.value.line == 3
    assert ":3:" in str(err.value)


def test_comma_decimal_rejected(tmp_path):
    p = write(tmp_path, "a.xyzt", "0,5 0 0 0\n")
    with pytest.raises(FormatError):
        load_point_cloud(p)


def test_nan_token_rejected(tmp_path):
    p = write(tmp_path, "a.xyzt", "nan 0 0 0\n")
    with pytest.raises(FormatError):
        load_point_cloud(p)


def test_empty_file_is_empty_cloud_error(tmp_path):
    p = write(tmp_path, "a.xyzt", "# x y z t\n")
    with pytest.raises(EmptyCloudError):
        load_point_cloud(p)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_point_cloud(tmp_path / "missing.xyzt")


def test_missing_t_is_atemporal_or_uses_dt(tmp_path):
    c = load_point_cloud(write(tmp_path, "a.xyzt", "0 0 0\n1 0 0\n"))
    assert not c.temporal and np.all(c.t == 0)
    c = load_point_cloud(write(tmp_path, "b.xyzt", "# x y z dt=0.5\n0 0 0\n1 0 0\n2 0 0\n"))
    assert c.temporal and np.allclose(c.t, [0, 0.5, 1.0])


def test_ply_ascii_with_time(tmp_path):
    text = "\n".join([
        "ply", "format ascii 1.0", "element vertex 3", "property float x", "property float y",
        "property float z", "property double time", "end_header",
        "0 0 0 2", "1 0 0 1", "2 0 0 0",
    ]) + "\n"
    c = load_point_cloud(write(tmp_path, "a.ply", text))
    assert np.array_equal(c.t, [0, 1, 2])
    assert np.array_equal(c.xyz[:, 0], [2, 1, 0])


def test_ply_write_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_point_cloud(PointCloud.empty(), tmp_path / "a.ply", "ply-ascii")


def test_save_empty_cloud_writes_header_only(tmp_path):
    p = tmp_path / "e.xyzt"
    save_point_cloud(PointCloud.empty(), p)
    lines = p.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("#")


def test_save_three_points_in_t_order(tmp_path):
    c = PointCloud(np.arange(9.0).reshape(3, 3), [2.0, 0.0, 1.0])
    p = tmp_path / "c.xyzt"
    save_point_cloud(c, p)
    rows = [list(map(float, ln.split())) for ln in p.read_text().splitlines()[1:]]
    assert len(rows) == 3
    assert [r[3] for r in rows] == [0.0, 1.0, 2.0]


def test_large_round_trip_precision(tmp_path, rng):
    n = 100_000
    xyz = rng.uniform(-50, 50, (n, 3))
    t = np.sort(rng.uniform(0, 60, n))
    c = PointCloud(xyz, t)
    p = tmp_path / "big.xyzt"
    save_point_cloud(c, p)
    back = load_point_cloud(p)
    assert len(back) == n
    assert np.max(np.abs(back.xyz - c.xyz)) < 1e-6
    assert np.max(np.abs(back.t - c.t)) < 1e-6


coords = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(coords, coords, coords, st.floats(0, 1e4)), min_size=1, max_size=40))
def test_round_trip_property(tmp_path_factory, rows):
    arr = np.array(rows, dtype=float)
    c = PointCloud(arr[:, :3], arr[:, 3])
    p = tmp_path_factory.mktemp("rt") / "c.xyzt"
    save_point_cloud(c, p)
    back = load_point_cloud(p)
    assert len(back) == len(c)
    assert np.all(np.diff(back.t) >= 0)
    assert np.max(np.abs(back.xyz - c.xyz)) <= 1e-6
    lo, hi = back.bounds
    assert np.all(back.xyz >= lo) and np.all(back.xyz <= hi)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50))
def test_constructor_sorts_by_t(ts):
    c = PointCloud(np.zeros((len(ts), 3)), ts)
    assert np.all(np.diff(c.t) >= 0)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), [-1.0])


# ---------------------------------------------------------------- trajectories


def test_two_row_trajectory(tmp_path):
    p = write(tmp_path, "t.csv", "t,x,y,z,qx,qy,qz,qw\n0,0,0,0,0,0,0,1\n1,1,0,0,0,0,0,1\n")
    tr = load_trajectory(p)
    assert len(tr) == 2
    assert np.allclose(tr.orientations, [[0, 0, 0, 1]] * 2)


def test_bad_quaternion_rejected(tmp_path):
    p = write(tmp_path, "t.csv", "0,0,0,0,0,0,0,0.5\n1,1,0,0,0,0,0,1\n")
    with pytest.raises(FormatError):
        load_trajectory(p)


def test_nearly_unit_quaternion_normalized(tmp_path):
    p = write(tmp_path, "t.csv", "0,0,0,0,0,0,0,1.0005\n1,1,0,0,0,0,0,1\n")
    tr = load_trajectory(p)
    assert abs(np.linalg.norm(tr.orientations[0]) - 1) < 1e-12


@pytest.mark.parametrize("second", ["0", "-1"])
def test_non_increasing_time_rejected(tmp_path, second):
    p = write(tmp_path, "t.csv", f"0,0,0,0,0,0,0,1\n{second},1,0,0,0,0,0,1\n")
    with pytest.raises(FormatError):
        load_trajectory(p)


def test_perturbed_trajectory_round_trip_has_zero_ate(tmp_path):
    ref = straight_pass([0, 0, 1.3], [40, 5, 1.3])
    est = perturb_trajectory(ref, DriftModel(scale=0.95, noise_sigma=0.02, drift_rate=0.01, seed=4))
    p = tmp_path / "est.csv"
    save_trajectory(est, p)
    back = load_trajectory(p)
    assert np.array_equal(back.t, est.t)
    assert np.array_equal(back.positions, est.positions)
    # zero up to the roundoff of the SVD inside the alignment
    assert ate_pos(back, est).ate_pos < 1e-12


# ---------------------------------------------------------------- reference trees


def test_one_tree(tmp_path):
    trees = load_reference_trees(write(tmp_path, "r.csv", "1,0,0,28.0\n"))
    assert trees == [ReferenceTree(1, 0.0, 0.0, 28.0)]


def test_duplicate_id_named(tmp_path):
    with pytest.raises(FormatError, match="duplicate tree id 7"):
        load_reference_trees(write(tmp_path, "r.csv", "id,x,y,dbh_cm\n7,0,0,20\n7,1,1,22\n"))


def test_non_positive_dbh(tmp_path):
    with pytest.raises(FormatError, match="positive"):
        load_reference_trees(write(tmp_path, "r.csv", "1,0,0,0\n"))


def test_species_column(tmp_path):
    trees = load_reference_trees(write(tmp_path, "r.csv", "id,x,y,dbh_cm,species\n1,0,0,28,pine\n2,1,0,20,\n"))
    assert trees[0].species == "pine" and trees[1].species is None


def test_scene_reference_round_trip(tmp_path):
    scene = generate_forest(650, (0, 0, 40, 40), 28, 8, seed=3)
    refs = scene.reference_trees()
    p = tmp_path / "r.csv"
    save_reference_trees(refs, p)
    back = load_reference_trees(p)
    assert len(back) == len(scene.trees)
    assert [t.dbh for t in back] == [t.dbh for t in scene.trees]
    assert back == refs
