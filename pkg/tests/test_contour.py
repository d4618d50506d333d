import numpy as np
import pytest

from higfa.contour import (
    ContourError,
    ControlPointError,
    ContourParams,
    EdgeMap,
    Provenance,
    TpsError,
    TpsWarp,
    augment_contour,
    canny,
    farthest_point_subset,
    fit_tps,
    flip_rotate,
    load_edge_map,
    save_edge_map,
    select_control_points,
    warp_edge_map,
)

from oracles import best_min_dist_subset


def test_canny_constant_images_are_empty():
    assert canny(np.zeros((24, 24))).bits.sum() == 0
    assert canny(np.full((24, 24), 255.0)).bits.sum() == 0


def test_canny_vertical_step_edge_single_line():
    img = np.zeros((32, 32))
    img[:, 16:] = 255.0
    em = canny(img, 120, 200)
    assert em.bits.dtype == np.uint8
    # one pixel per row, at the step column (first bright column) +- 1
    for row in em.bits:
        cols = np.nonzero(row)[0]
        assert len(cols) == 1
        assert abs(int(cols[0]) - 16) <= 1


def test_canny_threshold_defaults_and_bounds():
    import inspect

    sig = inspect.signature(canny)
    assert sig.parameters["low"].default == 120
    assert sig.parameters["high"].default == 200
    with pytest.raises(ContourError):
        canny(np.zeros((8, 8)), 200, 120)
    with pytest.raises(ContourError):
        canny(np.zeros((8, 8)), -1, 100)


def _dot_map(shape, dots):
    bits = np.zeros(shape, dtype=np.uint8)
    for x, y in dots:
        bits[y, x] = 1
    return EdgeMap(bits=bits)


def test_flip_rotate_identity_and_involution():
    rng = np.random.default_rng(0)
    em = EdgeMap(bits=(rng.random((20, 20)) < 0.2).astype(np.uint8))
    out = flip_rotate(em, flip=False, angle_deg=0.0)
    assert np.array_equal(out.bits, em.bits)
    twice = flip_rotate(flip_rotate(em, True, 0.0), True, 0.0)
    assert np.array_equal(twice.bits, em.bits)
    assert twice.provenance.flipped is False


def test_flip_rotate_analytic_coordinate():
    # 3-4-5 angle: sin=0.6, cos=0.8, within the +-45 degree contract.
    # offset (0,-10) from center rotates to exactly (6,-8).
    em = _dot_map((21, 21), [(10, 0)])
    angle = float(np.degrees(np.arctan2(0.6, 0.8)))
    out = flip_rotate(em, flip=False, angle_deg=angle)
    assert out.bits[2, 16] == 1
    assert out.bits.sum() == 1
    assert out.provenance.rotation_deg == pytest.approx(angle)


def test_flip_rotate_rejects_large_angles():
    em = _dot_map((9, 9), [(4, 4)])
    with pytest.raises(ContourError):
        flip_rotate(em, False, 46.0)


def test_farthest_point_greedy_matches_bruteforce_on_collinear_row():
    pts = np.array([[float(x), 0.0] for x in range(10)])
    sel = farthest_point_subset(pts, 3)
    xs = sorted(sel[:, 0].tolist())
    assert xs[0] == 0.0 and xs[2] == 9.0 and xs[1] in (4.0, 5.0)
    dmin = min(
        float(np.hypot(*(sel[i] - sel[j])))
        for i in range(3) for j in range(i + 1, 3)
    )
    assert dmin == best_min_dist_subset(pts, 3)


def test_select_control_points_forced_when_pool_is_exactly_k():
    dots = [(6, 6), (20, 6), (6, 20), (20, 20), (33, 33)]
    em = _dot_map((40, 40), dots)
    pts = select_control_points(em, grid=8, k=5, rng=np.random.default_rng(1))
    got = {tuple(p) for p in pts.tolist()}
    assert got == {(float(x), float(y)) for x, y in dots}


def test_select_control_points_too_few_patches():
    em = _dot_map((40, 40), [(6, 6), (20, 20)])
    with pytest.raises(ControlPointError, match="skip TPS"):
        select_control_points(em, grid=8, k=5, rng=np.random.default_rng(0))


def test_tps_identity_fit():
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 8.0], [3.0, 2.0]])
    warp = fit_tps(pts, pts)
    assert np.max(np.abs(warp.weights)) < 1e-12
    np.testing.assert_allclose(warp.affine, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], atol=1e-12)


def test_tps_translation_is_exact_everywhere():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 20, size=(5, 2))
    warp = fit_tps(pts, pts + np.array([2.0, 3.0]))
    probes = rng.uniform(-10, 30, size=(200, 2))
    np.testing.assert_allclose(warp(probes), probes + np.array([2.0, 3.0]), atol=1e-9)


def test_tps_interpolates_control_points():
    rng = np.random.default_rng(3)
    src = rng.uniform(0, 16, size=(5, 2))
    tgt = src + rng.uniform(-2, 2, size=(5, 2))
    warp = fit_tps(src, tgt)
    assert np.max(np.abs(warp(src) - tgt)) < 1e-9


def test_tps_affine_targets_give_zero_weights():
    rng = np.random.default_rng(4)
    src = rng.uniform(0, 16, size=(6, 2))
    a = np.array([[1.1, 0.2], [-0.1, 0.9]])
    b = np.array([3.0, -1.0])
    warp = fit_tps(src, src @ a.T + b)
    assert np.max(np.abs(warp.weights)) < 1e-9
    probes = rng.uniform(0, 16, size=(100, 2))
    np.testing.assert_allclose(warp(probes), probes @ a.T + b, atol=1e-9)


def test_tps_rejects_collinear_and_duplicate_sources():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(TpsError):
        fit_tps(line, line + 1.0)
    dup = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 5.0]])
    with pytest.raises(TpsError):
        fit_tps(dup, dup)


def _identity_warp(n=4):
    pts = np.array([[0.0, 0.0], [15.0, 0.0], [0.0, 15.0], [15.0, 15.0]])[:n]
    return TpsWarp(source_points=pts, target_points=pts,
                   weights=np.zeros((n, 2)),
                   affine=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))


def test_warp_edge_map_identity_is_bitwise():
    rng = np.random.default_rng(5)
    em = EdgeMap(bits=(rng.random((16, 16)) < 0.3).astype(np.uint8))
    out = warp_edge_map(em, _identity_warp())
    assert np.array_equal(out.bits, em.bits)


def test_warp_edge_map_default_threshold():
    import inspect

    assert inspect.signature(warp_edge_map).parameters["binarize_threshold"].default == 100


def test_warp_edge_map_translation_moves_content_exactly():
    em = _dot_map((20, 20), [(5, 7)])
    anchors = np.array([[0.0, 0.0], [19.0, 0.0], [0.0, 19.0], [19.0, 19.0]])
    # backward map p -> p - d moves content by exactly d = (2, 3)
    warp = fit_tps(anchors, anchors - np.array([2.0, 3.0]))
    out = warp_edge_map(em, warp)
    assert out.bits.sum() == 1
    assert out.bits[10, 7] == 1  # (x=5+2, y=7+3)
    assert out.provenance.tps_source is not None


def _shape_image(size=48):
    """A filled rectangle with a notch: plenty of strong edges."""
    img = np.zeros((size, size))
    img[10:38, 8:40] = 220.0
    img[20:28, 20:28] = 0.0
    return img


def test_augment_contour_rigid_never_invokes_tps():
    em = augment_contour(_shape_image(), "rigid",
                         ContourParams(), np.random.default_rng(7))
    assert em.provenance.tps_source is None
    assert em.provenance.tps_skipped is None


def test_augment_contour_zeroed_randomness_is_plain_canny():
    img = _shape_image()
    params = ContourParams(max_rotation_deg=0.0, flip_prob=0.0, perturb_scale=0.0)
    base = canny(img)
    for rigidity in ("rigid", "nonrigid"):
        em = augment_contour(img, rigidity, params, np.random.default_rng(8))
        assert np.array_equal(em.bits, base.bits), rigidity


def test_augment_contour_nonrigid_deterministic_under_seed():
    img = _shape_image()
    a = augment_contour(img, "nonrigid", ContourParams(), np.random.default_rng(99))
    b = augment_contour(img, "nonrigid", ContourParams(), np.random.default_rng(99))
    assert np.array_equal(a.bits, b.bits)
    np.testing.assert_array_equal(a.provenance.tps_target, b.provenance.tps_target)
    assert set(np.unique(a.bits)).issubset({0, 1})


def test_augment_contour_tps_failure_falls_back():
    img = np.zeros((32, 32))  # no edges at all
    em = augment_contour(img, "nonrigid", ContourParams(), np.random.default_rng(0))
    assert em.bits.sum() == 0
    assert em.provenance.tps_skipped is not None
    assert em.provenance.tps_source is None


def test_edge_map_rejects_non_binary():
    with pytest.raises(ContourError):
        EdgeMap(bits=np.array([[0, 2]], dtype=np.uint8))


def test_save_load_round_trip_with_provenance(tmp_path):
    img = _shape_image()
    em = augment_contour(img, "nonrigid", ContourParams(), np.random.default_rng(11))
    p = tmp_path / "em.pgm"
    save_edge_map(p, em)
    assert (tmp_path / "em.pgm.json").exists()
    back = load_edge_map(p)
    assert np.array_equal(back.bits, em.bits)
    assert back.provenance.flipped == em.provenance.flipped
    assert back.provenance.rotation_deg == pytest.approx(em.provenance.rotation_deg)
    if em.provenance.tps_source is not None:
        np.testing.assert_allclose(back.provenance.tps_source, em.provenance.tps_source)


def test_png_round_trip(tmp_path):
    from higfa.imageio import read_gray, write_gray

    rng = np.random.default_rng(12)
    img = rng.integers(0, 256, size=(17, 23)).astype(np.uint8)
    for ext in ("pgm", "png"):
        path = tmp_path / f"img.{ext}"
        write_gray(path, img)
        assert np.array_equal(read_gray(path), img)
