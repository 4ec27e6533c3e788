"""Parratt recursion, internal wavefield, transmittance and absorption.

Inside layer j the wavefunction is

    psi_j(z) = t_j exp(i q_j (z - z_j)) + s_j exp(-i q_j (z - z_j)),

with z measured downward from the top surface, z_j the top of layer j and
q_j = sqrt(kz^2 - 4 pi rho_j).  With the loss convention Im(rho) <= 0 the
product -4 pi Im(rho) is >= 0, so the root with Im(q_j) >= 0 is taken and
the transmitted wave decays into the stack.  The incident amplitude is 1 and
the reflection coefficient is referenced to the top surface (z = 0).

All functions accept scalar or array ``kz`` (nm^-1); layer quantities carry
the layer index on the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stack import LayerStack, SpinChannel

_EPS = np.finfo(float).eps


def normal_wavevectors(sld, kz) -> np.ndarray:
    """q_j = sqrt(kz^2 - 4 pi rho_j) with Im(q_j) >= 0, shape (L, *kz.shape)."""
    kz = np.asarray(kz, dtype=float)
    sld = np.asarray(sld, dtype=complex).reshape((-1,) + (1,) * kz.ndim)
    q2 = kz**2 - 4 * np.pi * sld
    # branch point (q = 0 exactly) makes the Fresnel ratio 0/0
    q2 = np.where(q2 == 0, 1j * _EPS * np.maximum(kz**2, _EPS), q2)
    q = np.sqrt(q2)
    return np.where(q.imag < 0, -q, q)


@dataclass(frozen=True)
class Wavefield:
    """Per-layer amplitudes of the down-going (t) and up-going (s) waves.

    ``top`` is the depth (nm) of each layer's upper interface; the incident
    medium uses 0 and extends to negative z.
    """

    kz: np.ndarray
    q: np.ndarray
    t: np.ndarray
    s: np.ndarray
    thickness: np.ndarray
    sld: np.ndarray
    top: np.ndarray

    @property
    def r(self):
        return self.s[0]

    @property
    def n_layers(self) -> int:
        return len(self.thickness)

    def _layer_of(self, z):
        z = np.asarray(z, dtype=float)
        idx = np.searchsorted(self.top[1:], z, side="right")
        return np.where(z < 0, 0, idx)

    def psi(self, z) -> np.ndarray:
        """Wavefunction at depths ``z`` (nm); scalar-kz wavefields only."""
        if np.ndim(self.kz):
            raise ValueError("psi() needs a wavefield computed at a single kz")
        z = np.asarray(z, dtype=float)
        j = self._layer_of(z)
        zeta = z - self.top[j]
        q = self.q[j]
        return self.t[j] * np.exp(1j * q * zeta) + self.s[j] * np.exp(-1j * q * zeta)

    def dpsi(self, z) -> np.ndarray:
        """d psi / dz at depths ``z``."""
        if np.ndim(self.kz):
            raise ValueError("dpsi() needs a wavefield computed at a single kz")
        z = np.asarray(z, dtype=float)
        j = self._layer_of(z)
        zeta = z - self.top[j]
        q = self.q[j]
        return 1j * q * (self.t[j] * np.exp(1j * q * zeta) - self.s[j] * np.exp(-1j * q * zeta))

    def layer_integrals(self, substrate_tail: bool = True) -> np.ndarray:
        """Closed-form integral of |psi|^2 over each layer (nm).

        The incident medium contributes 0.  The substrate entry is the
        integral of the decaying transmitted wave to infinity (inf when the
        substrate carries an undamped travelling wave), or 0 when
        ``substrate_tail`` is False.
        """
        q, t, s = self.q, self.t, self.s
        d = self.thickness.reshape((-1,) + (1,) * np.ndim(self.kz))
        a, b = q.real, q.imag
        out = (np.abs(t) ** 2 * _int_exp(-2 * b, d)
               + np.abs(s) ** 2 * _int_exp(2 * b, d)
               + 2 * np.real(t * np.conj(s) * _int_exp(2j * a, d)))
        out = np.real(out).astype(float)
        out[0] = 0.0
        tail_amp = np.abs(t[-1]) ** 2
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            tail = np.where(tail_amp == 0, 0.0, tail_amp / (2 * b[-1]))
        out[-1] = tail if substrate_tail else 0.0
        return out


def _int_exp(c, d):
    """Integral of exp(c z) for z in [0, d], elementwise, stable for c d -> 0."""
    c = np.asarray(c)
    x = c * d
    small = np.abs(x) < 1e-8
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        big = np.expm1(x) / np.where(small, 1.0, c)
    series = d * (1 + x / 2 + x * x / 6)
    return np.where(small, series, big)


def _solve(d, sld, kz) -> Wavefield:
    kz = np.asarray(kz, dtype=float)
    d = np.asarray(d, dtype=float)
    n = len(d)
    q = normal_wavevectors(sld, kz)
    rf = (q[:-1] - q[1:]) / (q[:-1] + q[1:])
    dd = d.reshape((-1,) + (1,) * kz.ndim)
    ratio = np.zeros_like(q)
    for j in range(n - 2, -1, -1):
        x = (rf[j] + ratio[j + 1]) / (1 + rf[j] * ratio[j + 1])
        ratio[j] = x * np.exp(2j * q[j] * dd[j])
    t = np.zeros_like(q)
    t[0] = 1.0
    for j in range(n - 1):
        down = t[j] * np.exp(1j * q[j] * dd[j])
        t[j + 1] = (1 + rf[j]) * down / (1 + rf[j] * ratio[j + 1])
    s = ratio * t
    top = np.concatenate([[0.0, 0.0], np.cumsum(d[1:-1])])
    return Wavefield(kz=kz, q=q, t=t, s=s, thickness=d, sld=np.asarray(sld, dtype=complex), top=top)


def _profile(stack: LayerStack, channel, lossless: bool):
    sld = stack.slds(SpinChannel(channel))
    if lossless:
        sld = sld.real.astype(complex)
    return stack.thicknesses(), sld


def reflection_coefficient(stack: LayerStack, channel, kz, lossless: bool = False):
    """Complex reflection coefficient r = |r| exp(i phi) at the top surface.

    Zero-thickness inner layers are skipped: their two interfaces compose
    to the identity, and skipping them keeps r bit-identical.
    """
    d, sld = _profile(stack, channel, lossless)
    keep = np.ones(d.size, dtype=bool)
    keep[1:-1] = d[1:-1] > 0
    return _solve(d[keep], sld[keep], kz).r


@dataclass(frozen=True)
class SpinReflectance:
    kz: np.ndarray
    r_amp: np.ndarray
    phase: np.ndarray
    channel: SpinChannel

    @property
    def r(self):
        return self.r_amp * np.exp(1j * self.phase)

    @property
    def reflectivity(self):
        return self.r_amp**2


def reflectance(stack: LayerStack, channel, kz, lossless: bool = False) -> SpinReflectance:
    """Spin-resolved complex reflectance from the Parratt recursion."""
    r = reflection_coefficient(stack, channel, kz, lossless)
    return SpinReflectance(np.asarray(kz, dtype=float), np.abs(r), np.angle(r), SpinChannel(channel))


def wavefield(stack: LayerStack, channel, kz, lossless: bool = False) -> Wavefield:
    d, sld = _profile(stack, channel, lossless)
    return _solve(d, sld, kz)


@dataclass(frozen=True)
class DensityProfile:
    z: np.ndarray
    density: np.ndarray


def probability_density(wf: Wavefield, n_points_per_layer: int = 50,
                        substrate_depth: float = 50.0) -> DensityProfile:
    """|psi(z)|^2 sampled uniformly in every finite layer and the top of the substrate.

    Meant for plotting; integrals use :meth:`Wavefield.layer_integrals`.
    """
    pieces = []
    for j in range(1, wf.n_layers):
        depth = wf.thickness[j] if j < wf.n_layers - 1 else substrate_depth
        if depth <= 0:
            continue
        pieces.append(wf.top[j] + np.linspace(0.0, depth, n_points_per_layer, endpoint=j == wf.n_layers - 1))
    z = np.concatenate(pieces) if pieces else np.zeros(1)
    return DensityProfile(z=z, density=np.abs(wf.psi(z)) ** 2)


def transmittance(stack: LayerStack, channel, kz, lossless: bool = False):
    """Transmitted flux Re(q_sub) |t_sub|^2 / kz."""
    wf = wavefield(stack, channel, kz, lossless)
    return wf.q[-1].real * np.abs(wf.t[-1]) ** 2 / wf.kz


def absorption_direct(stack: LayerStack, channel, kz, lossless: bool = False):
    """A = 1 - R - T."""
    wf = wavefield(stack, channel, kz, lossless)
    big_r = np.abs(wf.r) ** 2
    big_t = wf.q[-1].real * np.abs(wf.t[-1]) ** 2 / wf.kz
    return 1.0 - big_r - big_t


class QuadratureError(ArithmeticError):
    pass


def absorption_by_layer(stack: LayerStack, channel, kz, include_substrate: bool = False) -> np.ndarray:
    """Per-layer terms of A = -(4 pi / kz) sum_j Im(rho_j) integral |psi|^2.

    The substrate term is 0 unless ``include_substrate``; by default the flux
    entering the substrate is counted as transmission, which is what makes
    the sum balance ``1 - R - T``.
    """
    wf = wavefield(stack, channel, kz)
    norms = wf.layer_integrals(substrate_tail=include_substrate)
    im = wf.sld.imag.reshape((-1,) + (1,) * np.ndim(wf.kz))
    with np.errstate(invalid="ignore"):
        terms = np.where(im == 0, 0.0, -4 * np.pi / wf.kz * im * norms)
    if not np.all(np.isfinite(terms)):
        raise QuadratureError("absorption integral did not converge (non-finite layer term)")
    return terms


def absorption_integral(stack: LayerStack, channel, kz, include_substrate: bool = False):
    """Absorption from the wavefield: -(4 pi / kz) integral |psi|^2 Im(rho) dz."""
    return absorption_by_layer(stack, channel, kz, include_substrate).sum(axis=0)
