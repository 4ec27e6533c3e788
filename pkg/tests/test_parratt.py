import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bare, tmm_reflection
from giantgh.parratt import (QuadratureError, absorption_by_layer, absorption_direct, absorption_integral,
                             normal_wavevectors, probability_density, reflectance, reflection_coefficient,
                             transmittance, wavefield)
from giantgh.stack import Layer, LayerStack, kz_from_wavelength

KC_SI = math.sqrt(4 * math.pi * 2.07e-4)


def test_total_reflection_bare_si():
    r = reflectance(bare(2.07e-4), "up", 0.03)
    assert r.r_amp == pytest.approx(1.0, abs=1e-14)
    # analytic Fresnel phase
    kappa = math.sqrt(KC_SI**2 - 0.03**2)
    assert r.phase == pytest.approx(-2 * math.atan(kappa / 0.03), abs=1e-13)


def test_vacuum_gives_no_reflection():
    assert reflection_coefficient(bare(0.0), "up", np.linspace(0.01, 0.1, 5)) == pytest.approx(0.0, abs=0)


def test_branch_choice():
    q = normal_wavevectors(np.array([0, 2.07e-4 - 1e-7j, 1e-3 - 0.0j]), np.array([0.01, 0.05]))
    assert np.all(q.imag >= 0)
    # exactly at the critical edge the branch point is regularized, not singular
    r = reflection_coefficient(bare(2.07e-4), "up", KC_SI)
    assert np.isfinite(r) and abs(r) <= 1 + 1e-12


def test_table1_dip_and_oracle(stack, beam):
    kz = kz_from_wavelength(np.linspace(0.8, 1.0, 801), beam.alpha)
    rd = reflectance(stack, "down", kz).reflectivity
    i = int(np.argmin(rd))
    assert 0.039 < kz[i] < 0.042
    assert rd[i] < 0.9 * np.median(rd)
    assert abs(reflection_coefficient(stack, "down", kz[i]) - tmm_reflection(stack, "down", kz[i])) < 1e-12


def _random_stack(draw_layers, lossless):
    layers = [Layer("vacuum", math.inf, 0.0)]
    for i, (d, rho, rm, im) in enumerate(draw_layers[:-1]):
        layers.append(Layer(f"L{i}", d, rho, rm, 0.0 if lossless else im))
    d, rho, rm, im = draw_layers[-1]
    layers.append(Layer("sub", math.inf, rho, 0.0, 0.0 if lossless else im))
    return LayerStack(tuple(layers))


_layer = st.tuples(st.floats(0.5, 60.0), st.floats(-3e-4, 9e-4), st.floats(0.0, 5e-4), st.floats(-1e-5, 0.0))


@settings(max_examples=150, deadline=None)
@given(st.lists(_layer, min_size=1, max_size=9), st.floats(0.003, 0.2), st.sampled_from(["up", "down"]),
       st.booleans())
def test_parratt_matches_transfer_matrix(rows, kz, channel, lossless):
    s = _random_stack(rows, lossless)
    assert abs(reflection_coefficient(s, channel, kz) - tmm_reflection(s, channel, kz)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(_layer, min_size=1, max_size=9), st.floats(0.003, 0.2), st.sampled_from(["up", "down"]))
def test_passive_bounds(rows, kz, channel):
    s = _random_stack(rows, lossless=False)
    r = reflectance(s, channel, kz).r_amp
    a = absorption_direct(s, channel, kz)
    assert r <= 1 + 1e-12
    assert -1e-12 <= a <= 1 + 1e-12


def test_lossless_below_every_edge_is_total():
    s = LayerStack((Layer("v", math.inf, 0), Layer("a", 20, 4e-4), Layer("b", 35, 6e-4), Layer("s", math.inf, 5e-4)))
    kz = np.linspace(0.005, 0.95 * math.sqrt(4 * math.pi * 4e-4), 50)
    assert np.allclose(reflectance(s, "up", kz).r_amp, 1.0, atol=1e-13)


def test_zero_thickness_layer_is_invisible(stack):
    kz = np.linspace(0.01, 0.1, 97)
    thin = stack.insert_layer(3, Layer("ghost", 0.0, 7e-4, im_rho=-1e-6))
    assert np.array_equal(reflection_coefficient(stack, "down", kz), reflection_coefficient(thin, "down", kz))


def test_wavefield_continuity(stack):
    for ch in ("up", "down"):
        for kz in (0.02, 0.0404, 0.07):
            wf = wavefield(stack, ch, kz)
            scale = np.max(np.abs(wf.t) + np.abs(wf.s))
            for j in range(1, wf.n_layers):
                z = wf.top[j]
                # evaluate each side with its own layer's amplitudes
                left = j - 1
                zeta = z - wf.top[left]
                q = wf.q[left]
                psi_l = wf.t[left] * np.exp(1j * q * zeta) + wf.s[left] * np.exp(-1j * q * zeta)
                dpsi_l = 1j * q * (wf.t[left] * np.exp(1j * q * zeta) - wf.s[left] * np.exp(-1j * q * zeta))
                psi_r = wf.t[j] + wf.s[j]
                dpsi_r = 1j * wf.q[j] * (wf.t[j] - wf.s[j])
                assert abs(psi_l - psi_r) < 1e-10 * scale
                assert abs(dpsi_l - dpsi_r) < 1e-10 * scale * abs(wf.q).max()
            assert wf.s[-1] == 0
            assert wf.r == reflection_coefficient(stack, ch, kz)


def test_resonance_density(stack, beam):
    kz = kz_from_wavelength(0.9, beam.alpha)
    down = probability_density(wavefield(stack, "down", kz), 200)
    zmax = down.z[np.argmax(down.density)]
    lower = stack.indices("FeCoV")[-1]
    top = sum(stack[i].thickness for i in range(1, lower))
    assert top <= zmax <= top + stack[lower].thickness
    assert down.density.max() > 10
    up = probability_density(wavefield(stack, "up", kz), 200)
    ti_bottom = stack[1].thickness + stack[2].thickness
    below = up.density[up.z > ti_bottom]
    # evanescent in the upper FeCoV and nothing left underneath it
    assert np.all(np.diff(below[: 200]) < 0)
    assert below[up.z[up.z > ti_bottom] > ti_bottom + stack[3].thickness].max() < 1e-4
    assert np.all(down.density >= 0)


def test_transmitted_plane_wave():
    wf = wavefield(bare(2.07e-4), "up", 0.08)
    d = probability_density(wf, 20, substrate_depth=500.0)
    assert np.allclose(d.density, abs(wf.t[-1]) ** 2, rtol=1e-12)


def test_flux_and_absorption_lossless(stack):
    kz = np.linspace(0.002, 0.3, 500)
    ll = stack.lossless()
    for ch in ("up", "down"):
        r = reflectance(ll, ch, kz).reflectivity
        assert np.max(abs(r + transmittance(ll, ch, kz) - 1)) < 1e-10
        assert np.max(abs(absorption_integral(ll, ch, kz))) == 0


def test_absorption_at_resonance(stack, beam):
    kz = 0.0404
    a = absorption_direct(stack, "down", kz)
    r = reflectance(stack, "down", kz).reflectivity
    assert transmittance(stack, "down", kz) < 1e-3
    assert a == pytest.approx(1 - r, abs=1e-3)
    assert a > 0.05
    a_up = absorption_direct(stack, "up", kz_from_wavelength(0.9, beam.alpha))
    assert a_up < 0.2 * a


def test_absorption_integral_single_absorbing_medium():
    s = bare(2.07e-4, -1e-6)
    kz = np.linspace(0.005, 0.95 * KC_SI, 40)
    r2 = reflectance(s, "up", kz).reflectivity
    assert np.allclose(absorption_integral(s, "up", kz, include_substrate=True), 1 - r2, rtol=0, atol=1e-12)
    # counting the substrate flux as transmission instead balances 1 - R - T
    assert np.allclose(absorption_integral(s, "up", kz), absorption_direct(s, "up", kz), atol=1e-12)


def test_layer_terms_sum(stack):
    kz = np.linspace(0.01, 0.1, 33)
    terms = absorption_by_layer(stack, "down", kz)
    assert terms.shape == (len(stack), kz.size)
    assert np.all(terms[0] == 0) and np.all(terms[-1] == 0)
    lower = stack.indices("FeCoV")[-1]
    i = np.argmin(abs(kz - 0.0404))
    assert terms[lower, i] == terms[:, i].max()


def test_nonconvergent_tail_flagged():
    lossless = bare(1e-4)
    assert absorption_integral(lossless, "up", 0.08, include_substrate=True) == 0
    # a loss too small to damp the transmitted wave in double precision
    s = LayerStack((Layer("v", math.inf, 0.0), Layer("a", 10, 1e-4, im_rho=-1e-7),
                    Layer("s", math.inf, 1e-4, im_rho=-5e-324)))
    with pytest.raises(QuadratureError):
        absorption_integral(s, "up", 0.08, include_substrate=True)
