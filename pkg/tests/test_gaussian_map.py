import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from splatrack.gaussian_map import (EmptyMapError, Gaussian3D, GaussianMap, MapFormatError,
                                    SceneSpec, ShConfigError, covariance, load_ply,
                                    make_synthetic_map, quat_to_rotmat, random_map, save_ply,
                                    sh_to_color)


def _write_ply(path, fields, rows):
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {f}" for f in fields]
    header.append("end_header")
    data = np.asarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(data.tobytes())


BASE_FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def test_load_ply_activations(tmp_path):
    path = tmp_path / "one.ply"
    _write_ply(path, BASE_FIELDS, [[0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]])
    gmap = load_ply(path)
    np.testing.assert_allclose(gmap.scales[0], [1, 1, 1])
    assert gmap.opacities[0] == pytest.approx(0.5)
    assert gmap.sh_degree == 0


def test_ply_round_trip(tmp_path):
    gmap = random_map(100, seed=5, sh_degree=3)
    path = tmp_path / "m.ply"
    save_ply(gmap, path)
    back = load_ply(path)
    for name in ("means", "rotations", "scales", "opacities", "sh"):
        np.testing.assert_allclose(getattr(back, name), getattr(gmap, name), rtol=1e-6, atol=1e-6)


def test_ply_errors(tmp_path):
    path = tmp_path / "bad.ply"
    _write_ply(path, BASE_FIELDS[:-1], [[0] * 13])
    with pytest.raises(MapFormatError, match="rot_3"):
        load_ply(path)
    _write_ply(path, BASE_FIELDS, [])
    with pytest.raises(EmptyMapError):
        load_ply(path)
    _write_ply(path, BASE_FIELDS + [f"f_rest_{i}" for i in range(6)], [[0] * 20])
    with pytest.raises(MapFormatError):
        load_ply(path)
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(MapFormatError, match="binary_little_endian"):
        load_ply(path)


def test_covariance_axis_aligned():
    g = Gaussian3D(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array([1.0, 2, 3]), 1.0,
                   np.zeros((1, 3)))
    np.testing.assert_allclose(covariance(g), np.diag([1.0, 4, 9]), atol=1e-15)


def test_covariance_axis_swap():
    c = np.cos(np.pi / 4)
    g = Gaussian3D(np.zeros(3), np.array([c, 0, 0, c]), np.array([1.0, 2, 1]), 1.0,
                   np.zeros((1, 3)))
    np.testing.assert_allclose(covariance(g), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_matches_product(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        s = rng.uniform(0.01, 2, 3)
        g = Gaussian3D(np.zeros(3), q, s, 1.0, np.zeros((1, 3)))
        R = quat_to_rotmat(q)
        S = np.diag(s)
        np.testing.assert_allclose(covariance(g), R @ S @ S.T @ R.T, atol=1e-9)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
@settings(max_examples=50, deadline=None)
def test_quaternion_gives_rotation(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_sh_degree0_view_independent(rng):
    sh = np.zeros((1, 3))
    for _ in range(5):
        d = rng.normal(size=3)
        np.testing.assert_allclose(sh_to_color(sh, d / np.linalg.norm(d)), 0.5)


def test_sh_clamps_negative():
    sh = np.full((1, 3), -10.0)
    np.testing.assert_array_equal(sh_to_color(sh, np.array([0, 0, 1.0])), 0.0)


def _real_sh_table(l, m, d):
    """Real SH built from the complex harmonics (Condon-Shortley phase included)."""
    polar = np.arccos(np.clip(d[2], -1, 1))
    azimuth = np.arctan2(d[1], d[0])
    if m == 0:
        return sph_harm_y(l, 0, polar, azimuth).real
    Y = sph_harm_y(l, abs(m), polar, azimuth)
    return np.sqrt(2) * (Y.real if m > 0 else Y.imag)


def test_sh_degree3_matches_oracle(rng):
    sh = rng.normal(0, 0.3, (16, 3))
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        expected = np.zeros(3)
        k = 0
        for l in range(4):
            for m in range(-l, l + 1):
                expected += _real_sh_table(l, m, d) * sh[k]
                k += 1
        np.testing.assert_allclose(sh_to_color(sh, d), np.maximum(expected + 0.5, 0), atol=1e-9)


def test_sh_bad_count():
    with pytest.raises(ShConfigError):
        sh_to_color(np.zeros((5, 3)), np.array([0, 0, 1.0]))


def test_checker_map():
    spec = SceneSpec(kind="checker", nx=10, ny=10, depth=2.0, depth_jitter=0.0,
                     color_a=0.2, color_b=0.8)
    gmap = make_synthetic_map(spec)
    assert len(gmap) == 100
    gray = gmap.colors()[:, 0].reshape(10, 10)
    assert np.all(gray[::2, ::2] == gray[0, 0]) and np.all(gray[1::2, 1::2] == gray[0, 0])
    assert np.all(gray[::2, 1::2] != gray[0, 0])
    np.testing.assert_allclose(sorted({round(g, 9) for g in gray.ravel()}), [0.2, 0.8])
    np.testing.assert_array_equal(gmap.means[:, 2], 2.0)


def test_synthetic_determinism():
    spec = SceneSpec(seed=9)
    a, b = make_synthetic_map(spec), make_synthetic_map(spec)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.sh, b.sh)


def test_wall_bounds():
    spec = SceneSpec(nx=7, ny=4, spacing=0.1, center_x=0.5, center_y=-0.2, depth=3.0,
                     depth_jitter=0.0)
    lo, hi = make_synthetic_map(spec).bounds
    np.testing.assert_allclose(lo, [0.5 - 0.3, -0.2 - 0.15, 3.0])
    np.testing.assert_allclose(hi, [0.5 + 0.3, -0.2 + 0.15, 3.0])


def test_invalid_maps():
    with pytest.raises(EmptyMapError):
        GaussianMap(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), [], np.zeros((0, 1, 3)))
    with pytest.raises(MapFormatError):
        GaussianMap([[0, 0, 1]], [[0, 0, 0, 0]], [[1, 1, 1]], [0.5], np.zeros((1, 1, 3)))
    with pytest.raises(MapFormatError):
        GaussianMap([[0, 0, 1]], [[1, 0, 0, 0]], [[1, -1, 1]], [0.5], np.zeros((1, 1, 3)))
    with pytest.raises(EmptyMapError):
        make_synthetic_map(SceneSpec(nx=0))
