"""Goos-Hanchen shifts from the reflection phase, dwell times and the
absorption-based shift estimates.

The lateral shift of a totally reflected spin state follows the
Artmann formula

    delta_i = (d phi_i / d kz) cot(alpha).

Lengths are in nm unless stated otherwise, times in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .constants import HBAR, NEUTRON_MASS, NM
from .parratt import absorption_direct, reflection_coefficient, wavefield
from .stack import LayerStack, SpinChannel


class UnwrapError(ArithmeticError):
    """Raised when the phase cannot be followed continuously on the grid."""


@dataclass(frozen=True)
class PhaseCurve:
    kz: np.ndarray
    phase: np.ndarray
    channel: SpinChannel


@dataclass(frozen=True)
class GhShiftCurve:
    kz: np.ndarray
    delta_up: np.ndarray
    delta_down: np.ndarray
    alpha: float

    @property
    def delta_rel(self) -> np.ndarray:
        return self.delta_down - self.delta_up


def _wrap(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


def phase_curve(stack: LayerStack, channel, kz_grid, lossless: bool = False,
                max_refinements: int = 40) -> PhaseCurve:
    """Continuously unwrapped reflection phase on ``kz_grid``.

    Intervals are bisected until every wrapped phase step is below pi/2
    and agrees, to within pi/2, with the step predicted from the local
    phase derivative at both ends (this catches full 2 pi windings that a
    wrapped step alone cannot see).  The unwrapped phase is then read back
    at the requested grid points.
    """
    grid = np.asarray(kz_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("kz_grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("kz_grid must be strictly increasing")
    k = grid.copy()
    raw = np.angle(reflection_coefficient(stack, channel, k, lossless))
    slope = phase_derivative(stack, channel, k, lossless)

    def unresolved():
        dk = np.diff(k)
        steps = _wrap(np.diff(raw))
        ends = np.maximum(np.abs(slope[:-1]), np.abs(slope[1:])) * dk
        pred = 0.5 * (slope[:-1] + slope[1:]) * dk
        return np.flatnonzero((np.abs(steps) >= np.pi / 2) | (ends >= np.pi / 2)
                              | (np.abs(pred - steps) >= np.pi / 2))

    for _ in range(max_refinements):
        bad = unresolved()
        if bad.size == 0:
            break
        mid = 0.5 * (k[bad] + k[bad + 1])
        if np.any((mid <= k[bad]) | (mid >= k[bad + 1])):
            break
        k = np.insert(k, bad + 1, mid)
        raw = np.insert(raw, bad + 1, np.angle(reflection_coefficient(stack, channel, mid, lossless)))
        slope = np.insert(slope, bad + 1, phase_derivative(stack, channel, mid, lossless))
    if unresolved().size:
        raise UnwrapError("grid too coarse to unwrap")
    steps = _wrap(np.diff(raw))
    start = np.pi if raw[0] == -np.pi else raw[0]
    unwrapped = start + np.concatenate([[0.0], np.cumsum(steps)])
    keep = np.searchsorted(k, grid)
    return PhaseCurve(kz=grid, phase=unwrapped[keep], channel=SpinChannel(channel))


def default_step(kz):
    """Finite-difference step h = max(1e-6, 1e-4 kz) in nm^-1."""
    return np.maximum(1e-6, 1e-4 * np.asarray(kz, dtype=float))


def phase_derivative(stack: LayerStack, channel, kz, lossless: bool = True, h=None,
                     max_shrink: int = 12):
    """d phi / d kz by Richardson-extrapolated central differences.

    Each difference is taken as arg(r(k + h) / r(k - h)), which needs no
    global unwrapping as long as the phase moves by less than pi/4 over 2h;
    where it moves faster the step is cut by 8 (at most ``max_shrink`` times).
    """
    kz = np.asarray(kz, dtype=float)
    h = default_step(kz) if h is None else np.asarray(h, dtype=float)
    h = np.array(np.broadcast_to(h, kz.shape), dtype=float)

    def jump(step):
        up = reflection_coefficient(stack, channel, kz + step, lossless)
        dn = reflection_coefficient(stack, channel, kz - step, lossless)
        return np.angle(up / dn)

    # shrink the step where a very narrow resonance winds the phase too fast
    for _ in range(max_shrink):
        bad = np.abs(jump(h)) >= np.pi / 4
        if not np.any(bad):
            break
        h = np.where(bad, h / 8, h)
    else:
        raise UnwrapError("grid too coarse to unwrap")
    coarse = jump(h) / (2 * h)
    fine = jump(h / 2) / h
    return (4 * fine - coarse) / 3


def ach_shift(stack: LayerStack, channel, kz, alpha: float, lossless: bool = True, h=None):
    """Lateral shift delta = (d phi / d kz) cot(alpha) in nm.

    Phases come from the lossless stack by default; pass ``lossless=False``
    to differentiate the phase of the absorbing stack.
    """
    return phase_derivative(stack, channel, kz, lossless, h) / np.tan(alpha)


def gh_shift_curve(stack: LayerStack, kz, alpha: float, lossless: bool = True) -> GhShiftCurve:
    kz = np.asarray(kz, dtype=float)
    return GhShiftCurve(
        kz=kz,
        delta_up=ach_shift(stack, SpinChannel.UP, kz, alpha, lossless),
        delta_down=ach_shift(stack, SpinChannel.DOWN, kz, alpha, lossless),
        alpha=float(alpha),
    )


def find_gh_peak(stack: LayerStack, alpha: float, channel=SpinChannel.DOWN,
                 kz_range=(0.01, 0.1), n_grid: int = 4000, lossless: bool = True):
    """Location and value (kz, delta) of the largest shift in ``kz_range``."""
    grid = np.linspace(*kz_range, n_grid)
    delta = ach_shift(stack, channel, grid, alpha, lossless)
    i = int(np.argmax(delta))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = minimize_scalar(lambda k: -float(ach_shift(stack, channel, k, alpha, lossless)),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    return float(res.x), float(-res.fun)


def _norm_integral(stack, channel, kz, lossless):
    wf = wavefield(stack, channel, kz, lossless)
    per_layer = wf.layer_integrals()
    # a travelling wave in the substrate leaves the structure and is not stored
    per_layer[-1] = np.where(wf.q[-1].imag > 0, per_layer[-1], 0.0)
    return per_layer.sum(axis=0)


def dwell_time(stack: LayerStack, channel, kz, lossless: bool = False):
    """Dwell time tau = integral |psi|^2 dz / v_z for unit incident amplitude.

    The integral runs over every layer below the surface, including the
    evanescent field in the substrate; a travelling transmitted wave is
    excluded.  v_z = hbar kz / m_n.
    """
    kz = np.asarray(kz, dtype=float)
    v_z = HBAR * kz / NM / NEUTRON_MASS
    return _norm_integral(stack, channel, kz, lossless) * NM / v_z


def shift_from_dwell(stack: LayerStack, channel, kz, alpha: float, lossless: bool = False):
    """delta = v_x tau with the incident-beam v_x = hbar kz cot(alpha) / m_n (nm)."""
    return _norm_integral(stack, channel, np.asarray(kz, dtype=float), lossless) / np.tan(alpha)


def _check_loss(im_rho):
    im_rho = np.asarray(im_rho, dtype=float)
    if np.any(im_rho == 0):
        raise ZeroDivisionError("im_rho = 0: no absorption length scale")
    if np.any(im_rho > 0):
        raise ValueError("im_rho must be negative (loss)")
    return im_rho


def shift_from_absorption(absorption, lam, im_rho):
    """delta = -A / (2 lambda Im rho) in nm (``lam`` in nm, ``im_rho`` in nm^-2)."""
    im_rho = _check_loss(im_rho)
    return -np.asarray(absorption, dtype=float) / (2 * np.asarray(lam, dtype=float) * im_rho)


def travel_length(absorption, lam, im_rho):
    """l = -ln(1 - A) / (2 lambda |Im rho|) in nm."""
    im_rho = _check_loss(im_rho)
    return -np.log1p(-np.asarray(absorption, dtype=float)) / (2 * np.asarray(lam, dtype=float) * np.abs(im_rho))


@dataclass(frozen=True)
class ExponentFit:
    """Result of fitting A = 1 - exp(c |Im rho|).

    ``residual`` is the rms misfit divided by the rms absorption.
    """

    c: float
    residual: float
    im_rho: np.ndarray
    absorption: np.ndarray
    layer: int
    note: str = ""

    def travel_length(self, lam: float) -> float:
        """-c / (2 lambda): the length over which the beam decays by exp(-1) in amplitude squared."""
        return -self.c / (2 * lam)


def default_scan_layer(stack: LayerStack) -> int:
    """Deepest magnetic layer, else the deepest lossy finite layer."""
    finite = range(1, len(stack) - 1)
    for pick in (lambda l: l.magnetic, lambda l: l.im_rho < 0):
        hits = [i for i in finite if pick(stack[i])]
        if hits:
            return hits[-1]
    raise ValueError("stack has no layer to scan")


def absorption_exponent_fit(stack: LayerStack, channel, kz: float, im_rho_grid,
                            layer: int | None = None) -> ExponentFit:
    """Fit c in A(Im rho) = 1 - exp(c |Im rho|) while scanning one layer's loss.

    Only the Im(rho) of ``layer`` (default: the deepest magnetic layer) is
    varied; everything else keeps its value in ``stack``.  The fit uses the
    loss magnitude so that c < 0 for a passive stack.
    """
    idx = default_scan_layer(stack) if layer is None else layer
    grid = np.asarray(im_rho_grid, dtype=float)
    if np.any(grid > 0):
        raise ValueError("im_rho_grid values must be <= 0")
    absorb = np.array([float(absorption_direct(stack.replace_layer(idx, im_rho=float(v)), channel, kz))
                       for v in grid])
    x = np.abs(grid)
    if np.max(np.abs(absorb), initial=0.0) < 1e-14 or not np.any(x > 0):
        return ExponentFit(0.0, 0.0, grid, absorb, idx, note="no absorption signal")
    y = -np.log1p(-np.clip(absorb, None, 1 - 1e-16))
    c0 = -float(np.dot(x, y) / np.dot(x, x))
    scale = 1.0 / np.max(x)
    sol = least_squares(lambda p: 1 - np.exp(p[0] * scale * x) - absorb, [c0 / scale], method="lm")
    c = float(sol.x[0] * scale)
    misfit = 1 - np.exp(c * x) - absorb
    rms = np.sqrt(np.mean(absorb**2))
    note = "" if sol.success else f"fit did not converge: {sol.message}"
    return ExponentFit(c, float(np.sqrt(np.mean(misfit**2)) / rms), grid, absorb, idx, note)
