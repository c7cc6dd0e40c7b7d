import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gelhand import io
from gelhand.core import GradientField, HeightMap, NonFinite
from gelhand.photometric import (
    LightRig, LUTNotBuilt, SingularLighting, GradientLUT, build_lut,
    central_gradient, export_heightmap, poisson_integrate, recover_gradients, render,
)

from oracles import smooth_map

RIG = LightRig.from_angles()


def bump(n=64, radius=20.0):
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n] - c
    z = np.sqrt(np.maximum(radius ** 2 - x * x - y * y, 0.0))
    return x, y, z


def dense_central_operator(rows, cols):
    """Explicit matrix of mirrored-border central differences (x then y)."""
    n = rows * cols
    dx = np.zeros((n, n))
    dy = np.zeros((n, n))
    idx = lambda r, c: r * cols + c
    for r in range(rows):
        for c in range(cols):
            i = idx(r, c)
            dx[i, idx(r, min(c + 1, cols - 1))] += 0.5
            dx[i, idx(r, max(c - 1, 0))] -= 0.5
            dy[i, idx(min(r + 1, rows - 1), c)] += 0.5
            dy[i, idx(max(r - 1, 0), c)] -= 0.5
    return np.vstack([dx, dy])


def test_flat_map_renders_uniform():
    frame = render(HeightMap(np.zeros((20, 30)), 0.1), RIG)
    img = frame.image
    assert (img == img[0, 0]).all()


def test_flat_map_closed_form_intensity():
    rig = LightRig.from_angles(elevation_deg=45, intensity=1.0, ambient=0.0, albedo=0.8)
    img = render(HeightMap(np.zeros((5, 5)), 1.0), rig).image
    expected = round(255 * 0.8 * np.cos(np.radians(45)))
    assert (img == expected).all()


def test_hemisphere_matches_closed_form_lambertian():
    x, y, z = bump(radius=20.0)
    frame = render(HeightMap(z, 1.0), RIG)
    # sphere normal is (x, y, z) / R
    n = np.stack([x, y, z], axis=-1) / 20.0
    core = x * x + y * y < (0.7 * 20) ** 2
    expected = np.clip(RIG.albedo * np.maximum(n @ RIG.directions.T, 0) + RIG.ambient, 0, 1)
    err = np.abs(frame.as_float()[core] - expected[core])
    assert err.max() < 0.03
    for ch in range(3):
        chan = np.where(core, frame.as_float()[..., ch], -1)
        r, c = np.unravel_index(np.argmax(chan), chan.shape)
        offset = np.array([x[r, c], y[r, c]])
        assert offset @ RIG.directions[ch, :2] > 0


def test_recover_flat_is_zero():
    g = recover_gradients(render(HeightMap(np.zeros((16, 16)), 0.1), RIG), RIG)
    assert np.abs(g.gx).max() < 0.02 and np.abs(g.gy).max() < 0.02


def test_recover_hemisphere_gradients():
    x, y, z = bump(radius=20.0)
    g = recover_gradients(render(HeightMap(z, 1.0), RIG), RIG)
    core = x * x + y * y < (0.7 * 20) ** 2
    zc = z[core]
    ex, ey = -x[core] / zc, -y[core] / zc
    rmse = np.sqrt(np.mean((g.gx[core] - ex) ** 2 + (g.gy[core] - ey) ** 2))
    assert rmse < 0.05


def test_collinear_lights_are_singular():
    d = np.array([[0, 0.6, 0.8], [0, 0.6, 0.8], [0.6, 0, 0.8]])
    rig = LightRig(d)
    frame = render(HeightMap(np.zeros((4, 4)), 1.0), RIG)
    with pytest.raises(SingularLighting):
        recover_gradients(frame, rig)


@pytest.mark.parametrize("slope", [(0.0, 0.0), (0.3, -0.2), (-0.5, 0.4), (0.1, 0.6)])
def test_recover_render_identity_within_quantization(slope):
    gx0, gy0 = slope
    y, x = np.mgrid[0:9, 0:9].astype(float)
    h = gx0 * x + gy0 * y
    g = recover_gradients(render(HeightMap(h, 1.0), RIG), RIG)
    # 0.5/255 rounding per channel through the inverse light matrix
    eps = np.linalg.norm(np.linalg.inv(RIG.matrix), 2) * np.sqrt(3) * 0.5 / 255
    mag = np.hypot(gx0, gy0)
    bound = eps * (1 + mag) * np.sqrt(1 + mag ** 2) * 1.05
    inner = (slice(1, -1), slice(1, -1))
    assert np.abs(g.gx[inner] - gx0).max() <= bound
    assert np.abs(g.gy[inner] - gy0).max() <= bound


def test_lut_requires_build():
    lut = GradientLUT()
    with pytest.raises(LUTNotBuilt):
        lut.lookup([128, 128, 128])
    with pytest.raises(ValueError):
        build_lut(RIG, samples=999)


def test_lut_flat_color():
    lut = build_lut(RIG, samples=2000)
    flat = render(HeightMap(np.zeros((3, 3)), 1.0), RIG).image[1, 1]
    g = lut.lookup(flat)
    assert np.hypot(*g) <= lut.bin_width


def test_lut_agrees_with_linear_solve(rng):
    lut = build_lut(RIG, samples=4000)
    r = np.sqrt(rng.uniform(0, 1, 100))
    t = rng.uniform(0, 2 * np.pi, 100)
    grads = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    y, x = np.mgrid[0:3, 0:3].astype(float)
    lut_g, lin_g = [], []
    for gx0, gy0 in grads:
        frame = render(HeightMap(gx0 * x + gy0 * y, 1.0), RIG)
        lut_g.append(lut.lookup(frame.image[1, 1]))
        lin = recover_gradients(frame, RIG)
        lin_g.append((lin.gx[1, 1], lin.gy[1, 1]))
    rmse = np.sqrt(np.mean(np.sum((np.array(lut_g) - np.array(lin_g)) ** 2, axis=1)))
    assert rmse < 2 * lut.bin_width


def test_poisson_zero_field():
    h = poisson_integrate(GradientField(np.zeros((10, 12)), np.zeros((10, 12))), 0.2)
    assert np.array_equal(h.h, np.zeros((10, 12)))


def test_poisson_analytic_integrable_field():
    n = 64
    y, x = np.mgrid[0:n, 0:n].astype(float)
    h = np.sin(2 * np.pi * x / n) * np.sin(2 * np.pi * y / n)
    gx, gy = central_gradient(h)
    rec = poisson_integrate(GradientField(gx, gy)).h
    err = (rec - rec.mean()) - (h - h.mean())
    assert np.sqrt(np.mean(err ** 2)) < 1e-6
    assert rec.min() == 0


def test_poisson_matches_dense_least_squares():
    n = 8
    y, x = np.mgrid[0:n, 0:n].astype(float)
    gx, gy = -y, x
    rec = poisson_integrate(GradientField(gx, gy)).h
    d = dense_central_operator(n, n)
    g = np.concatenate([gx.ravel(), gy.ravel()])
    sol, *_ = np.linalg.lstsq(d, g, rcond=None)
    dense_res = np.linalg.norm(d @ sol - g)
    ours_res = np.linalg.norm(d @ rec.ravel() - g)
    assert ours_res == pytest.approx(dense_res, rel=1e-9)
    assert np.allclose(rec - rec.mean(), sol.reshape(n, n) - sol.mean(), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_poisson_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    g1 = [rng.normal(size=(12, 9)) for _ in range(2)]
    g2 = [rng.normal(size=(12, 9)) for _ in range(2)]
    h1 = poisson_integrate(GradientField(*g1)).h
    h2 = poisson_integrate(GradientField(*g2)).h
    h = poisson_integrate(GradientField(a * g1[0] + b * g2[0], a * g1[1] + b * g2[1])).h
    diff = h - (a * h1 + b * h2)
    assert np.abs(diff - diff.mean()).max() < 1e-9


def test_poisson_rejects_non_finite():
    with pytest.raises(NonFinite):
        GradientField(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))

    class Raw:
        gx = np.array([[np.inf, 0.0]])
        gy = np.zeros((1, 2))

    with pytest.raises(NonFinite):
        poisson_integrate(Raw())


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_smooth_map(seed):
    h = smooth_map(seed)
    rec = poisson_integrate(recover_gradients(render(HeightMap(h, 0.1), RIG), RIG), 0.1).h
    err = (rec - rec.mean()) - (h - h.mean())
    assert np.sqrt(np.mean(err ** 2)) < 0.02 * np.ptp(h)


def test_shadowed_pixels_are_filled():
    x, y, z = bump(n=48, radius=15.0)
    g = recover_gradients(render(HeightMap(z, 1.0), RIG), RIG)
    assert np.isfinite(g.gx).all() and np.isfinite(g.gy).all()


def test_marker_mask_filled_from_neighbors():
    frame = render(HeightMap(np.zeros((10, 10)), 1.0), RIG)
    mask = np.zeros((10, 10), bool)
    mask[4:6, 4:6] = True
    g = recover_gradients(frame, RIG, mask=mask)
    assert np.abs(g.gx).max() < 0.02


def test_rig_config_round_trip(tmp_path):
    rig = LightRig.from_angles((0, 120, 240), 50.0, ambient=0.05, albedo=0.7)
    io.write_kv(tmp_path / "rig.cfg", rig.to_config())
    back = LightRig.from_config(io.read_kv(tmp_path / "rig.cfg"))
    assert np.allclose(back.directions, rig.directions)
    assert back.albedo == 0.7 and np.allclose(back.ambient, 0.05)


def test_heightmap_exports(tmp_path):
    x, y, z = bump(n=16, radius=6.0)
    hm = HeightMap(z, 0.5)
    export_heightmap(hm, tmp_path / "h.pgm")
    q = io.read_pgm16(tmp_path / "h.pgm").astype(float)
    assert q.shape == (16, 16) and q.max() == 65535
    assert np.allclose(q / 65535 * np.ptp(z), z - z.min(), atol=np.ptp(z) / 65535)
    export_heightmap(hm, tmp_path / "h.ply", floor=0.0)
    pts, ids = io.read_ply(tmp_path / "h.ply")
    assert ids is None and len(pts) == int((z > 0).sum())
