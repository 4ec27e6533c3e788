import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from giantgh.instrument import (AngularKernel, DetectorGeometry, DetectorMap, ReducedCurve, alpha_eff,
                                bin_constant_q, convolve_grid, default_kernel, divergence_convolve,
                                fit_log_linear, make_kernel, model_curve, normalize_intensity,
                                normalize_polarization, q_from_pixel, simulate_detector_map)
from giantgh.stack import BeamConfig, kz_from_wavelength

ALPHA = math.radians(0.34)
GEOM = DetectorGeometry()


def test_geometry_validation():
    with pytest.raises(ValueError):
        DetectorGeometry(pixel_pitch=0)
    with pytest.raises(ValueError):
        DetectorGeometry(center_pixel=90)


def test_q_examples():
    assert q_from_pixel(GEOM.z0, 0.9, GEOM, ALPHA) == pytest.approx(4 * math.pi * ALPHA / 0.9, rel=1e-15)
    assert q_from_pixel(GEOM.z0, 0.9, GEOM, ALPHA) == pytest.approx(0.0829, abs=1e-4)
    assert q_from_pixel(GEOM.z0, 0.9, GEOM, ALPHA) == pytest.approx(2 * kz_from_wavelength(0.9, ALPHA), rel=1e-4)
    z_direct = GEOM.z0 + 2 * GEOM.Ld * ALPHA * 1e3
    assert abs(q_from_pixel(z_direct, 0.9, GEOM, ALPHA)) < 1e-15
    with pytest.raises(ValueError):
        q_from_pixel(GEOM.z0, 0.0, GEOM, ALPHA)


@given(st.floats(0.0, 50.0), st.floats(0.3, 2.0), st.floats(0.1, 3.0))
def test_q_linear_and_inverse(z, lam, scale):
    q0 = q_from_pixel(0.0, lam, GEOM, ALPHA)
    q1 = q_from_pixel(1.0, lam, GEOM, ALPHA)
    assert q_from_pixel(z, lam, GEOM, ALPHA) == pytest.approx(q0 + z * (q1 - q0), rel=1e-12, abs=1e-15)
    assert q_from_pixel(z, lam * scale, GEOM, ALPHA) * scale == pytest.approx(q_from_pixel(z, lam, GEOM, ALPHA),
                                                                            rel=1e-12, abs=1e-15)


def test_kernels_normalized():
    for k in (AngularKernel.delta(), AngularKernel.tophat(1e-4), AngularKernel.gauss(1e-4),
              AngularKernel.trapezoid(3e-4, 1e-4), AngularKernel.two_slit(), default_kernel(GEOM)):
        assert k.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert abs(np.dot(k.weights, k.offsets)) < 1e-18
    with pytest.raises(ValueError):
        AngularKernel(np.zeros(2), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        AngularKernel.trapezoid(1e-4, 2e-4)
    with pytest.raises(ValueError):
        make_kernel("boxcar", GEOM)
    assert all(make_kernel(k, GEOM).weights.size >= 1 for k in ("delta", "tophat", "trapezoid", "gauss"))


def test_gauss_kernel_moments():
    k = AngularKernel.gauss(2.355e-4)
    assert np.sqrt(np.dot(k.weights, k.offsets**2)) == pytest.approx(1e-4, rel=1e-3)


def test_delta_kernel_identity(stack):
    lam = np.linspace(0.6, 1.3, 50)
    y = np.linspace(-1, 1, 40) ** 2
    out, off = convolve_grid(y, 0.1, AngularKernel.delta())
    assert off == 0 and np.array_equal(out, y)
    f = lambda kz: np.cos(300 * kz)
    assert np.array_equal(divergence_convolve(f, lam, ALPHA, AngularKernel.delta()),
                          f(kz_from_wavelength(lam, ALPHA)))


def test_tophat_on_step_gives_ramp():
    dx, width = 0.01, 0.2
    x = np.arange(-1, 1 + dx / 2, dx)
    step = (x >= 0).astype(float)
    k = AngularKernel.tophat(width, n=20)
    out, off = convolve_grid(step, dx, k)
    xo = x[0] + (np.arange(out.size) - off) * dx
    inside = np.abs(xo) < width / 2 - dx
    assert np.allclose(out[inside], 0.5 + xo[inside] / width, atol=dx / width)
    assert np.all(out[(xo < -width / 2 - dx)] == 0)
    mid = (xo > width / 2 + dx) & (xo < 0.9)
    assert np.allclose(out[mid], 1.0)


@given(st.lists(st.floats(0, 10), min_size=30, max_size=80), st.floats(0.01, 0.2))
def test_convolution_preserves_integral(y, width):
    y = np.array(y)
    out, _ = convolve_grid(y, 0.01, AngularKernel.tophat(width))
    assert abs(out.sum() - y.sum()) <= 1e-10 * max(y.sum(), 1e-300)


def test_kernel_wider_than_grid():
    with pytest.raises(ValueError, match="wider"):
        convolve_grid(np.ones(5), 0.01, AngularKernel.tophat(1.0))


def test_nimo_echo(nimo):
    s, b = nimo
    kc = math.sqrt(4 * math.pi * s[-1].rho_n)
    lam = np.linspace(0.3, 2.0, 300)
    lam = lam[kz_from_wavelength(lam, b.alpha) < kc]
    _, p = model_curve(s, lam, b.alpha, "par", default_kernel(GEOM))
    assert np.all(p > 0.999)


def _single_pixel(stack, lam, geometry):
    g = DetectorGeometry(n_pixels=1, center_pixel=0.0)
    beam = BeamConfig(ALPHA, tuple(lam))
    return g, simulate_detector_map(stack, beam, g, geometry)


@pytest.mark.parametrize("geometry", ["par", "perp"])
def test_single_pixel_row_is_model_curve(stack, geometry):
    lam = np.linspace(0.6, 1.3, 120)
    g, m = _single_pixel(stack, lam, geometry)
    r, p = model_curve(stack, lam, ALPHA, geometry)
    assert np.allclose(m.intensity[0] / m.incident[0], r, rtol=1e-13)
    assert np.allclose(m.polarization[0], p, rtol=0, atol=1e-13)


def test_single_pixel_binning_regrids(stack):
    lam = np.linspace(0.6, 1.3, 120)
    g, m = _single_pixel(stack, lam, "par")
    q = np.sort(q_from_pixel(g.z0, lam, g, ALPHA))
    cur = bin_constant_q(m, g, ALPHA, q, "R")
    r, _ = model_curve(stack, lam, ALPHA, "par")
    assert np.allclose(cur.value, r[::-1], rtol=1e-13)
    assert cur.missing == ()


def test_round_trip(stack):
    lam = np.linspace(0.3, 1.5, 4001)
    beam = BeamConfig(ALPHA, tuple(lam))
    m = simulate_detector_map(stack, beam, GEOM, "par")
    q = np.linspace(0.05, 0.2, 1000)
    for obs, col, tol in (("R", 0, 0.005), ("P", 1, 0.005)):
        cur = bin_constant_q(m, GEOM, ALPHA, q, obs)
        ref = model_curve(stack, 4 * np.pi * ALPHA / cur.meta["q_mean"], ALPHA, "par")[col]
        rms = np.sqrt(np.mean((cur.value - ref) ** 2))
        assert rms < tol * (np.sqrt(np.mean(ref**2)) if obs == "R" else 1.0)


def test_missing_bins_not_zero_filled(stack):
    lam = np.linspace(0.8, 1.0, 20)
    g, m = _single_pixel(stack, lam, "par")
    q = np.linspace(0.01, 0.2, 200)
    cur = bin_constant_q(m, g, ALPHA, q, "P")
    assert len(cur.missing) > 0
    assert len(cur.abscissa) + len(cur.missing) == q.size
    assert not set(cur.missing) & set(cur.abscissa.tolist())
    assert np.all(np.isfinite(cur.value))


def test_polarization_from_binned_intensities():
    lam = np.array([1.0, 1.001])
    g = DetectorGeometry(n_pixels=1, center_pixel=0.0)
    up = np.array([[90.0, 10.0]])
    down = np.array([[10.0, 10.0]])
    m = DetectorMap(lam, g.pixels, up, down, np.ones_like(up) * 100)
    q = q_from_pixel(0.0, lam, g, ALPHA)
    cur = bin_constant_q(m, g, ALPHA, np.array([q.mean() - 1, q.mean(), q.mean() + 1]), "P")
    assert cur.value[0] == pytest.approx((100 - 20) / 120)
    assert cur.value[0] != pytest.approx(np.mean(m.polarization))
    assert cur.sigma[0] == pytest.approx(math.sqrt(4 * 100 * 20 / 120**3))
    with pytest.raises(ValueError):
        bin_constant_q(m, g, ALPHA, np.array([1.0]), "P")
    with pytest.raises(ValueError):
        bin_constant_q(m, g, ALPHA, np.array([0.0, 1.0]), "Q")


def test_fringe_tilt_sign(stack, beam):
    lam = np.linspace(0.75, 1.1, 701)
    m = simulate_detector_map(stack, replace(beam, lambda_grid=tuple(lam)), GEOM, "par")
    rows = [28, 34, 40]
    r = m.intensity / m.incident
    dips = [lam[np.argmin(r[i])] for i in rows]
    # constant q means lambda_dip is proportional to alpha_eff, which falls with z
    assert dips[0] > dips[1] > dips[2]
    a = alpha_eff(GEOM.z[rows], GEOM, beam.alpha)
    assert np.allclose(np.array(dips) / dips[1], a / a[1], atol=2e-3)


def test_detector_map_csv_round_trip(rng):
    lam = np.linspace(0.5, 1.5, 7)
    shape = (4, 7)
    m = DetectorMap(lam, np.arange(4), rng.random(shape), rng.random(shape), rng.random(shape) + 1)
    back = DetectorMap.from_csv("# comment line\n" + m.to_csv())
    for name in ("lambdas", "pixels", "up", "down", "incident"):
        assert np.allclose(getattr(back, name), getattr(m, name), rtol=1e-8)
    with pytest.raises(ValueError):
        DetectorMap.from_csv("1,2,3\n")
    with pytest.raises(ValueError):
        DetectorMap(lam, np.arange(3), rng.random(shape), rng.random(shape), rng.random(shape))


def test_reduced_curve_csv_round_trip():
    c = ReducedCurve(np.array([0.1, 0.2, 0.3]), np.array([1.0, 0.5, 0.25]), np.array([0.1, 0.1, 0.2]),
                     "test", (0.15,))
    back = ReducedCurve.from_csv(c.to_csv())
    assert np.allclose(back.value, c.value) and np.allclose(back.sigma, c.sigma)
    assert back.provenance == "test" and back.missing == (0.15,)
    with pytest.raises(ValueError):
        ReducedCurve(np.array([0.2, 0.1]), np.array([1.0, 1.0]))


def test_normalize_polarization():
    x = np.linspace(0.5, 1.3, 60)
    ref = ReducedCurve(x, 0.9 - 0.1 * (x - 0.8) ** 2)
    out = normalize_polarization(ref, ref)
    assert np.allclose(out.value, 1.0, atol=1e-12)
    assert out.meta["cond"] >= 1 and out.meta["residual"] < 1e-12
    with pytest.raises(ValueError):
        normalize_polarization(ReducedCurve(np.linspace(0.4, 1.4, 5), np.ones(5)), ref)


def test_log_linear_recovery():
    x = np.linspace(0.3, 1.5, 200)
    a, b = -2.3, 4.1
    ref = ReducedCurve(x, np.exp(a * x + b))
    fa, fb = fit_log_linear(ref)
    assert abs(fa - a) < 1e-6 and abs(fb - b) < 1e-6
    out = normalize_intensity(ref, ref)
    assert np.allclose(out.value, 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        fit_log_linear(ref, window=(3.0, 4.0))
    with pytest.raises(ValueError):
        normalize_intensity(ref, ref, scale_window=(3.0, 4.0))


def test_normalize_intensity_scales_to_model():
    x = np.linspace(0.3, 1.5, 200)
    ref = ReducedCurve(x, np.exp(-x))
    sample = ReducedCurve(x, 3 * np.exp(-x) * (1 + 0.1 * x))
    out = normalize_intensity(sample, ref, model=lambda lam: 0.5 * np.ones_like(lam))
    sel = (x >= 0.6) & (x <= 0.75)
    assert np.mean(out.value[sel]) == pytest.approx(0.5)
