"""Spin-echo operators and polarization observables.

Conventions (one place for all of them):

* Spin operators are the standard Pauli matrices in the z basis, which is
  also the measurement basis for P_z.
* The entangler axis is y.  ``entangler(theta) = exp(-i theta sigma_y / 2)``,
  i.e. diag(exp(-i theta/2), exp(+i theta/2)) on the (|up>_y, |down>_y) pair.
  Written as a real rotation [[cos b, sin b], [-sin b, cos b]] in the z basis
  this is the angle b = -theta/2.
* "Spin up" for the sample means spin along +n.  In the parallel geometry
  (n = y) the reflection operator is r_up P(+y) + r_dn P(-y) with P the
  spin projectors; in the perpendicular geometry (n = x) it is
  r_up P(+x) + r_dn P(-x) = U^dag M_par U with U = exp(-i pi sigma_z / 4).
* The echo state is psi = U_se^dag M U_se |up>_z and rho = psi psi^dag.
  R = Tr rho and P_mu = Tr(rho sigma_mu) / Tr rho.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .parratt import reflection_coefficient
from .stack import BeamConfig, LayerStack, SpinChannel, kz_from_wavelength, larmor_phase

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = (SIGMA_X, SIGMA_Y, SIGMA_Z)

# y -> x basis change: M_perp = U^dag M_par U
BASIS_CHANGE = np.diag([np.exp(-1j * np.pi / 4), np.exp(1j * np.pi / 4)])

UP_Z = np.array([1, 0], dtype=complex)


class Geometry(str, enum.Enum):
    PARALLEL = "par"
    PERPENDICULAR = "perp"


class NoReflectedBeam(ArithmeticError):
    """Both spin channels have zero reflectance: polarization is undefined."""


def _dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def projector(axis, sign: int = 1) -> np.ndarray:
    """Projector (1 + sign n.sigma) / 2 onto spin along ``sign * axis``."""
    n = np.asarray(axis, dtype=float)
    return (IDENTITY + sign * (n[0] * SIGMA_X + n[1] * SIGMA_Y + n[2] * SIGMA_Z)) / 2


def entangler(theta) -> np.ndarray:
    """exp(-i theta sigma_y / 2), broadcast over ``theta`` (shape (..., 2, 2))."""
    half = np.asarray(theta, dtype=float)[..., None, None] / 2
    return np.cos(half) * IDENTITY - 1j * np.sin(half) * SIGMA_Y


def disentangler(theta) -> np.ndarray:
    return _dagger(entangler(theta))


def reflection_operator(r_up, r_dn, geometry=Geometry.PARALLEL) -> np.ndarray:
    """Spin reflection operator for complex amplitudes, shape (..., 2, 2)."""
    r_up = np.asarray(r_up, dtype=complex)[..., None, None]
    r_dn = np.asarray(r_dn, dtype=complex)[..., None, None]
    m = r_up * projector((0, 1, 0), 1) + r_dn * projector((0, 1, 0), -1)
    if Geometry(geometry) is Geometry.PERPENDICULAR:
        m = _dagger(BASIS_CHANGE) @ m @ BASIS_CHANGE
    return m


@dataclass(frozen=True)
class TransferMatrix2:
    matrix: np.ndarray
    geometry: Geometry
    kz: np.ndarray


def sample_matrix(stack: LayerStack, kz, geometry=Geometry.PARALLEL, lossless: bool = False) -> TransferMatrix2:
    """Reflection operator of ``stack`` built from its Parratt reflectances."""
    r_up = reflection_coefficient(stack, SpinChannel.UP, kz, lossless)
    r_dn = reflection_coefficient(stack, SpinChannel.DOWN, kz, lossless)
    return TransferMatrix2(reflection_operator(r_up, r_dn, geometry), Geometry(geometry), np.asarray(kz, dtype=float))


@dataclass(frozen=True)
class SpinDensityMatrix:
    """2x2 spin density matrix; ``trace`` is Tr rho before any normalization."""

    matrix: np.ndarray
    trace: np.ndarray
    normalized: bool = False

    @classmethod
    def from_state(cls, psi) -> SpinDensityMatrix:
        psi = np.asarray(psi, dtype=complex)
        rho = psi[..., :, None] * np.conj(psi[..., None, :])
        return cls(rho, np.real(np.trace(rho, axis1=-2, axis2=-1)))

    def normalize(self) -> SpinDensityMatrix:
        if np.any(self.trace == 0):
            raise NoReflectedBeam("Tr rho = 0: conditional polarization undefined")
        return SpinDensityMatrix(self.matrix / self.trace[..., None, None], self.trace, True)

    def expectation(self, op) -> np.ndarray:
        return np.real(np.trace(self.matrix @ op, axis1=-2, axis2=-1))

    def polarization(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rho = self if self.normalized else self.normalize()
        return tuple(rho.expectation(s) for s in PAULI)


@dataclass(frozen=True)
class EchoObservables:
    P_x: np.ndarray
    P_y: np.ndarray
    P_z: np.ndarray
    R: np.ndarray
    beam: str = "collimated"

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.P_x, self.P_y, self.P_z, self.R))


def echo_density_matrix(r_up, r_dn, theta, geometry=Geometry.PARALLEL) -> SpinDensityMatrix:
    """Un-normalized rho from |up>_z through entangler, sample and disentangler."""
    m = reflection_operator(r_up, r_dn, geometry)
    u = entangler(theta)
    psi = (_dagger(u) @ m @ u @ UP_Z[:, None])[..., 0]
    return SpinDensityMatrix.from_state(psi)


def pipeline_observables(r_up, r_dn, phi_up, phi_dn, theta, geometry=Geometry.PARALLEL) -> EchoObservables:
    """Normalized observables evaluated with explicit 2x2 operator algebra."""
    a = np.asarray(r_up) * np.exp(1j * np.asarray(phi_up))
    b = np.asarray(r_dn) * np.exp(1j * np.asarray(phi_dn))
    rho = echo_density_matrix(a, b, theta, geometry)
    px, py, pz = rho.polarization()
    return EchoObservables(px, py, pz, rho.trace, "collimated")


def _guard(total, on_zero):
    zero = np.asarray(total) == 0
    if np.any(zero) and on_zero == "raise":
        raise NoReflectedBeam("no reflected beam")
    return np.where(zero, np.nan, total)


def observables_parallel(r_up, r_dn, phi_up, phi_dn, on_zero: str = "raise") -> EchoObservables:
    """Observables for n = e = y; independent of the Larmor phase.

    The sign of P_x follows the operator construction above: with
    delta_phi = phi_up - phi_dn, P_x = -2 r_up r_dn sin(delta_phi) / S.
    """
    r_up, r_dn = np.asarray(r_up, dtype=float), np.asarray(r_dn, dtype=float)
    dphi = np.asarray(phi_up) - np.asarray(phi_dn)
    total = r_up**2 + r_dn**2
    s = _guard(total, on_zero)
    return EchoObservables(
        P_x=-2 * r_up * r_dn / s * np.sin(dphi),
        P_y=(r_up**2 - r_dn**2) / s,
        P_z=2 * r_up * r_dn / s * np.cos(dphi),
        R=total / 2,
        beam="collimated",
    )


def perp_collimated_raw(r_up, r_dn, phi_up, phi_dn, theta):
    """Un-normalized (P~_x, P~_y, P~_z, R~) for a collimated beam, n = x, e = y."""
    ru, rd = np.asarray(r_up, dtype=float), np.asarray(r_dn, dtype=float)
    pu, pd = np.asarray(phi_up, dtype=float), np.asarray(phi_dn, dtype=float)
    th = np.asarray(theta, dtype=float)
    dp = pu - pd
    s2, c = np.sin(th), np.cos(th)
    px = 0.5 * (c * (s2 * (ru**2 + rd**2 - 2 * rd * ru * np.cos(dp)) + ru**2 - rd**2))
    py = rd * ru * c * np.sin(dp)
    pz = 0.5 * s2 * ((ru**2 + rd**2) * s2 + ru**2 - rd**2) + rd * ru * c**2 * np.cos(pd - pu)
    r = 0.5 * (ru**2 + rd**2 + (ru**2 - rd**2) * s2)
    return px, py, pz, r


def observables_perp_collimated(r_up, r_dn, phi_up, phi_dn, theta, on_zero: str = "raise"):
    """Return ``(raw, normalized)``: the tuple from :func:`perp_collimated_raw`
    and the observables divided by Tr rho = R~."""
    raw = perp_collimated_raw(r_up, r_dn, phi_up, phi_dn, theta)
    tr = _guard(raw[3], on_zero)
    norm = EchoObservables(raw[0] / tr, raw[1] / tr, raw[2] / tr, raw[3], "collimated")
    return raw, norm


def observables_perp_averaged(r_up, r_dn, phi_up, phi_dn, on_zero: str = "raise") -> EchoObservables:
    """Perpendicular observables averaged uniformly over one Larmor period."""
    r_up, r_dn = np.asarray(r_up, dtype=float), np.asarray(r_dn, dtype=float)
    dphi = np.asarray(phi_up) - np.asarray(phi_dn)
    s = _guard(r_up + r_dn, on_zero)
    pz = 2 * r_up * r_dn / s**2 * (1 + np.cos(dphi))
    zero = np.zeros(np.broadcast(pz, r_up).shape)
    return EchoObservables(zero, zero.copy(), pz, (r_up**2 + r_dn**2) / 2, "averaged")


def beam_average_perp(r_up, r_dn, phi_up, phi_dn, n_theta: int = 4096,
                      order: str = "normalize-first") -> EchoObservables:
    """Periodic trapezoid average of collimated perpendicular observables over theta.

    ``order="normalize-first"`` divides by Tr rho at each theta before
    averaging (conditional polarization, the default); ``"average-first"``
    averages the raw quantities and normalizes once (diagnostic variant).
    """
    theta = np.arange(n_theta) * (2 * np.pi / n_theta)
    args = [np.asarray(v, dtype=float)[..., None] for v in (r_up, r_dn, phi_up, phi_dn)]
    px, py, pz, r = perp_collimated_raw(*args, theta)
    if order == "normalize-first":
        with np.errstate(invalid="ignore", divide="ignore"):
            p = [np.mean(v / r, axis=-1) for v in (px, py, pz)]
    elif order == "average-first":
        rm = np.mean(r, axis=-1)
        p = [np.mean(v, axis=-1) / rm for v in (px, py, pz)]
    else:
        raise ValueError(f"unknown averaging order {order!r}")
    return EchoObservables(*p, np.mean(r, axis=-1), "averaged")


def rtilde_perp(r_up, r_dn, k, xi):
    """Collimated R~ as a function of wavevector k (nm^-1) with theta = k xi."""
    r_up, r_dn = np.asarray(r_up, dtype=float), np.asarray(r_dn, dtype=float)
    return 0.5 * (r_up**2 + r_dn**2 + (r_up**2 - r_dn**2) * np.sin(np.asarray(k) * xi))


def rtilde_perp_gaussian(r_up, r_dn, k, xi, dk_over_k: float):
    """R~ averaged over a Gaussian spread of k with sigma_k = dk_over_k * k.

    Uses <sin(k' xi)> = exp(-(sigma_k xi)^2 / 2) sin(k xi).
    """
    r_up, r_dn = np.asarray(r_up, dtype=float), np.asarray(r_dn, dtype=float)
    k = np.asarray(k, dtype=float)
    damp = np.exp(-0.5 * (dk_over_k * k * xi) ** 2)
    return 0.5 * (r_up**2 + r_dn**2 + (r_up**2 - r_dn**2) * damp * np.sin(k * xi))


@dataclass(frozen=True)
class EchoCurve:
    wavelength: np.ndarray
    P_z_par: np.ndarray
    P_z_perp: np.ndarray
    R_par: np.ndarray
    R_perp: np.ndarray
    theta: np.ndarray


def echo_curve(stack: LayerStack, beam: BeamConfig, lossless: bool = False) -> EchoCurve:
    """P_z and R in both geometries across the beam's wavelength grid.

    Wavelengths without any reflected beam give NaN polarization.
    """
    lam = beam.lambdas
    kz = kz_from_wavelength(lam, beam.alpha)
    r_up = reflection_coefficient(stack, SpinChannel.UP, kz, lossless)
    r_dn = reflection_coefficient(stack, SpinChannel.DOWN, kz, lossless)
    args = (np.abs(r_up), np.abs(r_dn), np.angle(r_up), np.angle(r_dn))
    par = observables_parallel(*args, on_zero="nan")
    perp = observables_perp_averaged(*args, on_zero="nan")
    return EchoCurve(lam, par.P_z, perp.P_z, par.R, perp.R, larmor_phase(beam, lam))
