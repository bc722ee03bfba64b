import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from undercanopy.errors import DegenerateFitError, EmptyCloudError
from undercanopy.forest import ForestScene, SensorModel, TreeModel, simulate_scan, straight_pass
from undercanopy.io import PointCloud
from undercanopy.stems import (
    Circle,
    PipelineParams,
    StemRejected,
    accept_cluster,
    arc_coverage,
    build_stem_curve,
    cluster_segment,
    detect_stems,
    detect_stems_verbose,
    estimate_dbh,
    estimate_ground_z,
    find_arcs,
    fit_circle,
    group_clusters_to_stems,
    histogram_coverage,
    radius_standard_error,
    refit_in_growth_plane,
    segment_cloud,
)
from undercanopy.stems.pipeline import StemHypothesis

P = PipelineParams()


def arc_points(n, radius=0.14, center=(0.0, 0.0), span_deg=90.0, start_deg=0.0, z=1.3, noise=0.0, rng=None):
    a = np.radians(start_deg + np.linspace(0.0, span_deg, n))
    xy = np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])
    if noise:
        xy = xy + rng.normal(scale=noise, size=xy.shape)
    return np.column_stack([xy, np.full(n, z)])


def ring_cloud(center=(0.0, 0.0), radius=0.14, heights=np.arange(0.2, 3.01, 0.1), n=60, span=120.0,
               lean=(0.0, 0.0, 1.0), t=0.0):
    """Points on a (possibly leaned) cylinder: one arc per height, axis through ``center`` at z=0."""
    u = np.asarray(lean, float)
    u /= np.linalg.norm(u)
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    out = []
    a = np.radians(np.linspace(0.0, span, n))
    for h in heights:
        s = h / u[2]
        c = np.array([center[0], center[1], 0.0]) + s * u
        ring = c + radius * (np.outer(np.cos(a), e1) + np.outer(np.sin(a), e2))
        out.append(ring)
    xyz = np.vstack(out)
    return PointCloud(xyz, np.full(len(xyz), t))


def single_tree_scan(tree, noise=0.0, ground=True):
    scene = ForestScene((tree,), (-10, -10, 10, 10))
    x, y = tree.base
    traj = straight_pass([x - 6, y - 2.2, 1.3], [x + 6, y - 2.2, 1.3])
    return simulate_scan(scene, traj, SensorModel(noise_sigma_at_1m=noise), seed=1, ground_returns=ground)


# ---------------------------------------------------------------- segmentation


def test_vertical_bins():
    c = PointCloud([[0, 0, 0.1], [0, 0, 0.5]], [0.0, 0.0])
    seg = segment_cloud(c, P)
    assert sorted(seg) == [(0, 0), (1, 0)]


def test_single_point_single_segment():
    assert len(segment_cloud(PointCloud([[1, 2, 3]], [4.0]), P)) == 1


def test_temporal_bins_and_atemporal():
    xyz = np.zeros((3, 3))
    c = PointCloud(xyz, [0.0, 4.9, 5.0])
    assert sorted(segment_cloud(c, P)) == [(0, 0), (0, 1)]
    assert sorted(segment_cloud(PointCloud(xyz, np.zeros(3), temporal=False), P)) == [(0, 0)]
    assert sorted(segment_cloud(c, PipelineParams.tls())) == [(0, 0)]


def test_partition_of_random_cloud(rng):
    c = PointCloud(rng.uniform(0, 5, (10_000, 3)), rng.uniform(0, 30, 10_000))
    seg = segment_cloud(c, P)
    allidx = np.concatenate(list(seg.values()))
    assert len(allidx) == 10_000 and len(np.unique(allidx)) == 10_000


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 100)), min_size=1, max_size=200),
       st.floats(0.05, 2.0), st.floats(0.5, 20.0))
def test_partition_property(rows, vbin, tbin):
    arr = np.array(rows)
    c = PointCloud(np.column_stack([np.zeros(len(arr)), np.zeros(len(arr)), arr[:, 0]]), arr[:, 1])
    seg = segment_cloud(c, PipelineParams(vertical_bin=vbin, temporal_bin=tbin))
    allidx = np.sort(np.concatenate(list(seg.values())))
    assert np.array_equal(allidx, np.arange(len(arr)))


def test_empty_cloud_rejected():
    with pytest.raises(EmptyCloudError):
        segment_cloud(PointCloud.empty(), P)
    with pytest.raises(EmptyCloudError):
        detect_stems(PointCloud.empty())


# ---------------------------------------------------------------- clustering


def test_two_groups_two_clusters(rng):
    a = rng.normal(0, 0.01, (50, 2))
    b = rng.normal(0, 0.01, (50, 2)) + [2, 0]
    cl = cluster_segment(np.vstack([a, b]), PipelineParams(cluster_eps=0.1))
    assert len(cl) == 2
    assert sorted(len(c) for c in cl) == [50, 50]


def test_too_few_points_no_clusters():
    assert cluster_segment(np.zeros((P.cluster_min_pts - 1, 2)), P) == []


def test_cluster_order_invariance(rng):
    xy = np.vstack([arc_points(80, 0.14)[:, :2], arc_points(60, 0.2, (0.6, 0.1))[:, :2],
                    rng.uniform(-1, 1, (40, 2))])
    xy = xy + rng.normal(scale=0.004, size=xy.shape)
    ref = {frozenset(c.tolist()) for c in cluster_segment(xy, P)}
    for _ in range(100):
        perm = rng.permutation(len(xy))
        got = {frozenset(perm[c].tolist()) for c in cluster_segment(xy[perm], P)}
        assert got == ref


def test_pooled_clustering_matches_raw_on_separated_arcs(rng):
    # repeated hits of the same surface, as consecutive frames produce
    arcs = [arc_points(60, 0.14)[:, :2], arc_points(60, 0.2, (0.8, 0.1), start_deg=120)[:, :2]]
    xy = np.vstack([np.repeat(a, 20, axis=0) for a in arcs])
    xy = xy + rng.normal(scale=0.002, size=xy.shape)
    raw = cluster_segment(xy, PipelineParams(cluster_cell=0.0))
    pooled = cluster_segment(xy, P)
    assert len(raw) == len(pooled) == 2
    assert [c.tolist() for c in raw] == [c.tolist() for c in pooled]
    with pytest.raises(ValueError):
        PipelineParams(cluster_cell=0.03)


# ---------------------------------------------------------------- circle fit


def test_exact_circle_recovered():
    pts = arc_points(10, 0.15, (1.0, 2.0), span_deg=324.0)[:, :2]
    c, rms = fit_circle(pts)
    assert np.allclose(c.center, [1, 2], atol=1e-9)
    assert abs(c.radius - 0.15) < 1e-9
    assert rms < 1e-9


def test_collinear_points_rejected():
    with pytest.raises(DegenerateFitError):
        fit_circle([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(DegenerateFitError):
        fit_circle([[0, 0], [1, 1]])


def test_half_arc_noise_median_error():
    rng = np.random.default_rng(0)
    errs = []
    for seed in range(200):
        r = rng.uniform(0.04, 0.40)
        pts = arc_points(200, r, span_deg=180.0, start_deg=rng.uniform(0, 360), noise=0.002, rng=rng)
        errs.append(abs(fit_circle(pts[:, :2])[0].radius - r))
    assert np.median(errs) < 1e-3


def test_radius_standard_error_matches_scatter():
    rng = np.random.default_rng(1)
    exact = arc_points(80, 0.15, span_deg=120.0)[:, :2]
    assert radius_standard_error(exact, fit_circle(exact)[0]) < 1e-9
    radii, ses = [], []
    for _ in range(400):
        pts = arc_points(80, 0.15, span_deg=120.0, noise=0.002, rng=rng)[:, :2]
        c, _ = fit_circle(pts)
        radii.append(c.radius)
        ses.append(radius_standard_error(pts, c))
    assert np.median(ses) == pytest.approx(np.std(radii), rel=0.2)
    short = arc_points(80, 0.15, span_deg=60.0, noise=0.002, rng=rng)[:, :2]
    assert radius_standard_error(short, fit_circle(short)[0]) > np.median(ses)


@given(st.floats(0.04, 0.4), st.floats(-50, 50), st.floats(-50, 50), st.floats(60, 360))
def test_fit_translation_invariant(r, cx, cy, span):
    pts = arc_points(40, r, (cx, cy), span_deg=span)[:, :2]
    c, _ = fit_circle(pts)
    assert abs(c.radius - r) < 1e-8


# ---------------------------------------------------------------- acceptance rules


def test_arc_90_degrees_40_points_accepted():
    pts = arc_points(40, 0.14, span_deg=90.0)
    ok, arc = accept_cluster(pts, fit_circle(pts[:, :2])[0], P)
    assert ok and arc.n_points == 40
    assert 89.0 <= arc.arc_coverage <= 91.0


def test_count_rule_more_than_35():
    pts = arc_points(34, 0.14, span_deg=90.0)
    ok, arc = accept_cluster(pts, fit_circle(pts[:, :2])[0], P)
    assert not ok and arc.rejected_by == ("count",)
    pts = arc_points(35, 0.14, span_deg=90.0)
    assert accept_cluster(pts, fit_circle(pts[:, :2])[0], P)[1].rejected_by == ("count",)
    pts = arc_points(36, 0.14, span_deg=90.0)
    assert accept_cluster(pts, fit_circle(pts[:, :2])[0], P)[0]


def test_arc_rule_50_degrees_rejected():
    pts = arc_points(100, 0.14, span_deg=50.0)
    ok, arc = accept_cluster(pts, fit_circle(pts[:, :2])[0], P)
    assert not ok and arc.rejected_by == ("arc",)
    # the histogram oracle agrees the 50-degree arc covers fewer than 60 occupied degrees
    assert histogram_coverage(pts[:, :2], np.zeros(2)) < 60


def test_radius_rule_bounds():
    for r, expect in ((0.039, False), (0.04, True), (0.40, True), (0.41, False)):
        pts = arc_points(60, r, span_deg=120.0)
        circle = Circle(np.zeros(2), r)
        ok, arc = accept_cluster(pts, circle, P)
        assert ok == expect, r
        if not expect:
            assert arc.rejected_by == ("radius",)


def test_inlier_rule():
    base = arc_points(100, 0.14, span_deg=120.0)
    circle = Circle(np.zeros(2), 0.14)
    pts = base.copy()
    pts[:21, :2] *= (0.14 + 0.031) / 0.14  # 21 points beyond 30 mm -> 79% inliers
    ok, arc = accept_cluster(pts, circle, P)
    assert not ok and arc.rejected_by == ("inliers",)
    pts = base.copy()
    pts[:20, :2] *= (0.14 + 0.029) / 0.14  # inside the band
    assert accept_cluster(pts, circle, P)[0]


def test_arc_coverage_contiguous_and_gapped():
    pts = arc_points(20, 0.14, span_deg=90.0)[:, :2]
    assert arc_coverage(pts, np.zeros(2)) == pytest.approx(90.0)
    two = np.vstack([arc_points(20, 0.14, span_deg=30.0)[:, :2],
                     arc_points(20, 0.14, span_deg=30.0, start_deg=180.0)[:, :2]])
    assert arc_coverage(two, np.zeros(2)) == pytest.approx(60.0)


@given(n=st.integers(20, 80), span=st.floats(30, 200), noise=st.floats(0, 0.04),
       dcount=st.integers(0, 30), dfrac=st.floats(0, 0.2), darc=st.floats(0, 60),
       dlo=st.floats(0, 0.1), dhi=st.floats(0, 0.2), seed=st.integers(0, 1000))
def test_threshold_monotonicity(n, span, noise, dcount, dfrac, darc, dlo, dhi, seed):
    rng = np.random.default_rng(seed)
    pts = arc_points(n, 0.14, span_deg=span, noise=noise, rng=rng)
    try:
        circle, _ = fit_circle(pts[:, :2])
    except DegenerateFitError:
        return
    ok, _ = accept_cluster(pts, circle, P)
    stricter = PipelineParams(
        min_cluster_points=P.min_cluster_points + dcount,
        inlier_fraction=min(1.0, P.inlier_fraction + dfrac),
        min_arc=P.min_arc + darc,
        radius_min=P.radius_min + dlo,
        radius_max=max(P.radius_min + dlo + 1e-3, P.radius_max - dhi),
    )
    ok2, _ = accept_cluster(pts, circle, stricter)
    assert not (ok2 and not ok)


# ---------------------------------------------------------------- grouping and refit


def test_vertical_cylinder_one_stem_vertical_axis():
    cloud = ring_cloud()
    res = detect_stems_verbose(cloud, P)
    assert len(res.hypotheses) == 1
    axis = res.hypotheses[0].growth_axis
    assert np.degrees(np.arccos(axis[2])) < 0.5


def test_no_arcs_no_stems():
    assert group_clusters_to_stems([], np.zeros((0, 3)), P) == []


def test_two_cylinders_two_stems():
    a = ring_cloud((0.0, 0.0))
    b = ring_cloud((1.0, 0.0), radius=0.1)
    cloud = PointCloud(np.vstack([a.xyz, b.xyz]), np.zeros(len(a) + len(b)))
    arcs = find_arcs(cloud, P)
    stems = group_clusters_to_stems(arcs, cloud.xyz, P)
    assert len(stems) == 2
    for stem, cx in zip(stems, (0.0, 1.0)):
        for arc in stem.arcs:
            assert np.all(np.abs(cloud.xyz[arc.indices, 0] - cx) < 0.25)


def test_vertical_refit_equals_original():
    cloud = ring_cloud()
    arcs = [a for a in find_arcs(cloud, P) if a.accepted]
    hyp = StemHypothesis(tuple(arcs), np.array([0.0, 0.0, 1.0]), np.zeros(3))
    refits, dropped = refit_in_growth_plane(hyp, cloud.xyz, 0.0, P)
    assert dropped == 0
    assert len(refits) == len(arcs)
    for r, a in zip(refits, sorted(arcs, key=lambda a: a.mean_height)):
        assert abs(r.diameter - 2 * a.circle.radius) < 1e-9


def lean_vector(deg):
    return (math.sin(math.radians(deg)), 0.0, math.cos(math.radians(deg)))


def leaned_slices(radius, lean_deg, heights, n=120):
    """Horizontal slices of a cylinder leaned along +x: ellipses with semi-axes r / cos(lean) and r."""
    k = math.tan(math.radians(lean_deg))
    a = np.radians(np.linspace(0.0, 360.0, n, endpoint=False))
    out = [np.column_stack([h * k + radius / math.cos(math.radians(lean_deg)) * np.cos(a),
                            radius * np.sin(a), np.full(n, h)]) for h in heights]
    xyz = np.vstack(out)
    return PointCloud(xyz, np.zeros(len(xyz)))


def test_leaned_cylinder_growth_plane_refit():
    r = 0.14
    cloud = leaned_slices(r, 10.0, np.arange(0.2, 3.0, 0.4))
    res = detect_stems_verbose(cloud, P)
    assert len(res.hypotheses) == 1
    hyp = res.hypotheses[0]
    refits, _ = refit_in_growth_plane(hyp, cloud.xyz, 0.0, P)
    plane = np.median([f.diameter for f in refits])
    naive = np.median([2 * a.circle.radius for a in hyp.arcs])
    assert abs(plane / (2 * r) - 1) < 1e-3
    # a circle fitted to the full ellipse lands between its two axes
    assert 1.0 < naive / (2 * r) < 1 / math.cos(math.radians(10.0)) + 1e-9
    assert abs(plane - 2 * r) < abs(naive - 2 * r)


def test_degenerate_projected_arc_dropped():
    good = ring_cloud()
    arcs = [a for a in find_arcs(good, P) if a.accepted][:2]
    xyz = np.vstack([good.xyz, [[5, 5, 1], [5.1, 5.1, 1], [5.2, 5.2 + 1e-13, 1]]])
    n = len(good)
    bad = arcs[0].__class__(key=(9, 0), indices=np.arange(n, n + 3), circle=arcs[0].circle, n_points=3,
                            inlier_fraction_observed=1.0, arc_coverage=90.0, mean_height=1.0)
    hyp = StemHypothesis((arcs[0], arcs[1], bad), np.array([0.0, 0.0, 1.0]), np.zeros(3))
    refits, dropped = refit_in_growth_plane(hyp, xyz, 0.0, P)
    assert dropped == 1 and len(refits) == 2


# ---------------------------------------------------------------- stem curve and DBH


def test_constant_curve_flat():
    curve = build_stem_curve([(h, 0.28) for h in (0.5, 1.0, 1.5, 2.0, 2.5)])
    assert np.allclose(curve.diameters, 0.28, atol=1e-12)


def test_single_outlier_removed():
    h = np.linspace(0.4, 4.0, 10)
    d = 0.30 - 0.008 * h
    clean = build_stem_curve(list(zip(h, d)))
    d2 = d.copy()
    d2[4] *= 3
    dirty = build_stem_curve(list(zip(h, d2)))
    assert dirty.removed == 1
    grid = np.linspace(0.5, 3.9, 30)
    assert np.max(np.abs(dirty.model(grid) - clean.model(grid))) < 1e-3


def test_linear_taper_recovered():
    h = np.linspace(0.3, 3.5, 12)
    d = 0.32 - 0.01 * h
    curve = build_stem_curve(list(zip(h, d)))
    assert np.max(np.abs(curve.model(h) - d)) < 1e-3
    assert np.allclose(np.diff(curve.heights), 0.1, atol=1e-9) or len(curve.heights) > 1


def test_curve_weights():
    h = np.linspace(0.4, 4.0, 10)
    d = 0.30 - 0.008 * h
    plain = build_stem_curve(list(zip(h, d)))
    same = build_stem_curve(list(zip(h, d)), weights=np.full(10, 7.0))
    assert np.allclose(plain.diameters, same.diameters, atol=1e-12)
    # a modest error: too small for the outlier rule, so only weighting can discount it
    d2 = d.copy()
    d2[5] += 0.01
    even = build_stem_curve(list(zip(h, d2)), smoothing=1e-4)
    w = np.ones(10)
    w[5] = 1e-4
    weighted = build_stem_curve(list(zip(h, d2)), smoothing=1e-4, weights=w)
    assert even.removed == weighted.removed == 0
    assert abs(weighted.model(h[5]) - d[5]) < abs(even.model(h[5]) - d[5])
    with pytest.raises(ValueError):
        build_stem_curve(list(zip(h, d)), weights=np.zeros(10))
    with pytest.raises(ValueError):
        build_stem_curve(list(zip(h, d)), weights=np.ones(3))


def test_curve_needs_two_samples():
    with pytest.raises(StemRejected):
        build_stem_curve([(1.0, 0.3)])


def test_dbh_of_cylinder_and_gap_rule():
    curve = build_stem_curve([(h, 0.28) for h in np.arange(0.4, 3.0, 0.4)])
    assert estimate_dbh(curve) == pytest.approx(28.0, abs=1e-9)
    high = build_stem_curve([(h, 0.28) for h in np.linspace(2.5, 4.0, 5)])
    assert estimate_dbh(high) is None
    near = build_stem_curve([(h, 0.28) for h in np.linspace(1.7, 4.0, 6)])
    assert estimate_dbh(near) == pytest.approx(28.0, abs=1e-6)


def test_ground_without_ground_returns():
    cloud = single_tree_scan(TreeModel(1, (0.0, 0.0), 0.0, 28.0, 15.0, 0.0), ground=False)
    g = estimate_ground_z(cloud.xyz, (0.0, 0.0), P)
    assert g <= cloud.xyz[:, 2].min() + np.ptp(cloud.xyz[:, 2]) * 0.06


def test_ground_with_simulated_returns(rng):
    xy = rng.uniform(-3, 3, (2000, 2))
    ground = np.column_stack([xy, rng.uniform(-0.01, 0.01, 2000)])
    stem = ring_cloud().xyz
    g = estimate_ground_z(np.vstack([ground, stem]), (0.0, 0.0), P)
    assert abs(g) < 0.02


def test_ground_local_patch(rng):
    patch = np.column_stack([rng.uniform(-1, 1, (500, 2)), np.full(500, 0.5)])
    far = np.column_stack([rng.uniform(10, 20, (5000, 2)), np.zeros(5000)])
    stem = ring_cloud().xyz + [0, 0, 0.5]
    g = estimate_ground_z(np.vstack([patch, far, stem]), (0.0, 0.0), P)
    assert abs(g - 0.5) < 0.02
    assert estimate_ground_z(far, (0.0, 0.0), P) == pytest.approx(0.0)


# ---------------------------------------------------------------- end to end


def test_noise_only_no_stems(rng):
    cloud = PointCloud(rng.uniform(0, 10, (5000, 3)), np.sort(rng.uniform(0, 20, 5000)))
    assert detect_stems(cloud) == []


def test_single_tree_dbh():
    tree = TreeModel(1, (0.0, 0.0), 0.0, 28.0, 15.0, 0.004)
    stems = detect_stems(single_tree_scan(tree))
    assert len(stems) == 1
    assert abs(stems[0].dbh - 28.0) < 0.5
    assert math.hypot(stems[0].x, stems[0].y) < 0.05


def test_tapered_tree_dbh():
    tree = TreeModel(1, (0.0, 0.0), 0.0, 20.0, 15.0, 0.01)
    stems = detect_stems(single_tree_scan(tree))
    assert len(stems) == 1
    assert abs(stems[0].dbh - 20.0) < 0.3


def test_stem_record_invariants():
    tree = TreeModel(1, (0.0, 0.0), 0.0, 24.0, 15.0, 0.004)
    (s,) = detect_stems(single_tree_scan(tree, noise=0.003))
    h = [p[0] for p in s.stem_curve]
    assert np.all(np.diff(h) > 0)
    assert s.dbh > 0


def test_rigid_invariance_about_vertical():
    tree = TreeModel(1, (0.3, -0.2), 0.0, 30.0, 15.0, 0.005, (math.sin(0.05), 0.0, math.cos(0.05)))
    cloud = single_tree_scan(tree)
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    moved = PointCloud(cloud.xyz @ R.T + [12.0, -7.0, 0.0], cloud.t)
    a = detect_stems_verbose(cloud)
    b = detect_stems_verbose(moved)
    ra = sorted(x.circle.radius for x in a.arcs if x.accepted)
    rb = sorted(x.circle.radius for x in b.arcs if x.accepted)
    assert len(ra) == len(rb) > 0
    assert np.max(np.abs(np.array(ra) - rb)) < 1e-9
    assert abs(a.stems[0].dbh - b.stems[0].dbh) < 1e-6


def test_parallel_equals_serial():
    tree = TreeModel(1, (0.0, 0.0), 0.0, 26.0, 15.0, 0.005)
    cloud = single_tree_scan(tree, noise=0.003)
    a = detect_stems(cloud, P, n_jobs=1)
    b = detect_stems(cloud, P, n_jobs=3)
    assert [(s.x, s.y, s.dbh, s.stem_curve) for s in a] == [(s.x, s.y, s.dbh, s.stem_curve) for s in b]


def test_params_validation():
    with pytest.raises(ValueError):
        PipelineParams(radius_min=0.5, radius_max=0.4)
    with pytest.raises(ValueError):
        PipelineParams(inlier_fraction=0.0)
    tls = PipelineParams.tls()
    assert tls.vertical_bin == 0.20 and not tls.use_temporal
