"""Detector geometry, angular resolution and time-of-flight data reduction.

A detector pixel at height z (mm) sees neutrons reflected at

    alpha_eff = alpha - (z - z0) / (2 Ld),

so the momentum transfer is q = (4 pi / lambda) alpha_eff to first order.
Spin-analyzed intensities are always binned per channel; polarization and
reflectivity are formed from the binned sums.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev

from .constants import MM
from .parratt import reflection_coefficient
from .spinecho import EchoObservables, Geometry, observables_parallel, observables_perp_averaged
from .stack import BeamConfig, LayerStack, SpinChannel, kz_from_wavelength


@dataclass(frozen=True)
class DetectorGeometry:
    """Linear position-sensitive detector; pixel i sits at z = i * pixel_pitch."""

    pixel_pitch: float = 0.64  # mm
    n_pixels: int = 80
    center_pixel: float = 34.0
    Ld: float = 4.35  # m

    def __post_init__(self):
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be positive")
        if self.n_pixels < 1:
            raise ValueError("n_pixels must be >= 1")
        if not 0 <= self.center_pixel <= self.n_pixels - 1:
            raise ValueError("center pixel outside the detector")
        if not self.Ld > 0:
            raise ValueError("Ld must be positive")

    @property
    def z0(self) -> float:
        return self.center_pixel * self.pixel_pitch

    @property
    def pixels(self) -> np.ndarray:
        return np.arange(self.n_pixels)

    @property
    def z(self) -> np.ndarray:
        return self.pixels * self.pixel_pitch

    @property
    def pixel_angle(self) -> float:
        """Angular width of one pixel in alpha (rad)."""
        return self.pixel_pitch * MM / (2 * self.Ld)


def alpha_eff(z, geom: DetectorGeometry, alpha: float):
    return alpha - (np.asarray(z, dtype=float) - geom.z0) * MM / (2 * geom.Ld)


def q_from_pixel(z, lam, geom: DetectorGeometry, alpha: float):
    """q(z, lambda) = (4 pi / lambda) [alpha - (z - z0) / (2 Ld)] in nm^-1."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    return 4 * np.pi / lam * alpha_eff(z, geom, alpha)


# -- angular kernels -------------------------------------------------------

@dataclass(frozen=True)
class AngularKernel:
    """Discrete angular distribution: offsets (rad) with weights summing to 1."""

    offsets: np.ndarray
    weights: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != np.shape(self.offsets) or w.ndim != 1 or w.size == 0:
            raise ValueError("offsets and weights must be matching 1-D arrays")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError("kernel weights must be nonnegative and sum to 1")

    @property
    def width(self) -> float:
        return float(np.ptp(self.offsets))

    @classmethod
    def delta(cls) -> AngularKernel:
        return cls(np.zeros(1), np.ones(1), "delta")

    @classmethod
    def tophat(cls, width: float, n: int = 21) -> AngularKernel:
        if width <= 0:
            return cls.delta()
        x = (np.arange(n) + 0.5) / n - 0.5
        return cls(x * width, np.full(n, 1.0 / n), "tophat")

    @classmethod
    def gauss(cls, fwhm: float, n: int = 21) -> AngularKernel:
        if fwhm <= 0:
            return cls.delta()
        x, w = np.polynomial.hermite_e.hermegauss(n)
        sigma = fwhm / (2 * np.sqrt(2 * np.log(2)))
        return cls(x * sigma, w / w.sum(), "gauss")

    @classmethod
    def trapezoid(cls, base: float, top: float, n: int = 41) -> AngularKernel:
        """Symmetric trapezoid with full widths ``base`` >= ``top``."""
        if not base >= top >= 0:
            raise ValueError("trapezoid needs base >= top >= 0")
        if base == 0:
            return cls.delta()
        x = ((np.arange(n) + 0.5) / n - 0.5) * base
        dens = np.clip((base / 2 - np.abs(x)) / max((base - top) / 2, 1e-300), 0, 1)
        return cls(x, dens / dens.sum(), "trapezoid")

    @classmethod
    def two_slit(cls, slit1: float = 0.5, slit2: float = 2.0, separation: float = 0.6, n: int = 41) -> AngularKernel:
        """Divergence passed by two slits (widths in mm, separation in m)."""
        base = (slit1 + slit2) * MM / separation
        top = abs(slit2 - slit1) * MM / separation
        k = cls.trapezoid(base, top, n)
        return cls(k.offsets, k.weights, "two_slit")

    def convolve(self, other: AngularKernel, n_max: int = 101) -> AngularKernel:
        """Distribution of the sum of the two angular offsets."""
        off = np.add.outer(self.offsets, other.offsets).ravel()
        w = np.multiply.outer(self.weights, other.weights).ravel()
        if off.size > n_max and np.ptp(off) > 0:
            edges = np.linspace(off.min(), off.max(), n_max + 1)
            idx = np.clip(np.digitize(off, edges) - 1, 0, n_max - 1)
            wb = np.bincount(idx, w, n_max)
            ob = np.bincount(idx, w * off, n_max)
            keep = wb > 0
            off, w = ob[keep] / wb[keep], wb[keep]
        return AngularKernel(off, w / w.sum(), f"{self.name}*{other.name}")

    def on_grid(self, dx: float) -> np.ndarray:
        """Weights on a symmetric grid of spacing ``dx`` (linear share to neighbours)."""
        half = int(np.ceil(np.max(np.abs(self.offsets)) / dx - 1e-9))
        out = np.zeros(2 * half + 1)
        pos = self.offsets / dx + half
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        np.add.at(out, lo, self.weights * (1 - frac))
        np.add.at(out, np.minimum(lo + 1, out.size - 1), self.weights * frac)
        return out


KERNELS = ("delta", "tophat", "trapezoid", "gauss")


def default_kernel(geom: DetectorGeometry, beam_width: float = 0.5) -> AngularKernel:
    """Pixel top-hat convolved with the projected beam-width top-hat (widths in mm)."""
    beam = AngularKernel.tophat(beam_width * MM / (2 * geom.Ld))
    return AngularKernel.tophat(geom.pixel_angle).convolve(beam)


def make_kernel(kind: str, geom: DetectorGeometry, beam: BeamConfig | None = None) -> AngularKernel:
    """Kernel by name as used on the command line."""
    if kind == "delta":
        return AngularKernel.delta()
    if kind == "tophat":
        return default_kernel(geom)
    if kind == "trapezoid":
        return AngularKernel.tophat(geom.pixel_angle).convolve(AngularKernel.two_slit())
    if kind == "gauss":
        fwhm = beam.divergence_fwhm if beam is not None and beam.divergence_fwhm else geom.pixel_angle
        return AngularKernel.gauss(fwhm)
    raise ValueError(f"unknown kernel {kind!r}; choose from {', '.join(KERNELS)}")


def divergence_convolve(func, lam, alpha: float, kernel: AngularKernel):
    """Kernel-weighted average of ``func(kz)`` over alpha at fixed wavelength."""
    lam = np.asarray(lam, dtype=float)
    out = 0.0
    for d, w in zip(kernel.offsets, kernel.weights):
        out = out + w * func(kz_from_wavelength(lam, alpha + d))
    return out


def convolve_grid(y, dx: float, kernel: AngularKernel):
    """Full discrete convolution of samples ``y`` (spacing ``dx``) with the kernel.

    Returns ``(values, offset)``; the output has ``len(y) + len(w) - 1``
    samples and its first sample sits ``offset`` grid steps before ``y[0]``.
    Sums (curve integrals) are preserved exactly.
    """
    y = np.asarray(y, dtype=float)
    if kernel.width > dx * (len(y) - 1):
        raise ValueError("kernel wider than model grid support")
    w = kernel.on_grid(dx)
    return np.convolve(y, w, mode="full"), (len(w) - 1) // 2


# -- model observables -----------------------------------------------------

def spin_observables(stack: LayerStack, kz, geometry=Geometry.PARALLEL, lossless: bool = False) -> EchoObservables:
    r_up = reflection_coefficient(stack, SpinChannel.UP, kz, lossless)
    r_dn = reflection_coefficient(stack, SpinChannel.DOWN, kz, lossless)
    args = (np.abs(r_up), np.abs(r_dn), np.angle(r_up), np.angle(r_dn))
    if Geometry(geometry) is Geometry.PARALLEL:
        return observables_parallel(*args, on_zero="nan")
    return observables_perp_averaged(*args, on_zero="nan")


def analyzed_intensities(stack, lam, alpha, geometry, kernel: AngularKernel, lossless=False):
    """Reflected intensity per unit incident flux in the analyzer's up/down channels."""

    def up(kz):
        o = spin_observables(stack, kz, geometry, lossless)
        return o.R * (1 + np.nan_to_num(o.P_z)) / 2

    def down(kz):
        o = spin_observables(stack, kz, geometry, lossless)
        return o.R * (1 - np.nan_to_num(o.P_z)) / 2

    return divergence_convolve(up, lam, alpha, kernel), divergence_convolve(down, lam, alpha, kernel)


def model_curve(stack, lam, alpha, geometry=Geometry.PARALLEL, kernel=None, lossless=False):
    """Smeared (R, P_z) versus wavelength, with P formed from smeared intensities."""
    kernel = AngularKernel.delta() if kernel is None else kernel
    u, d = analyzed_intensities(stack, lam, alpha, geometry, kernel, lossless)
    tot = u + d
    with np.errstate(invalid="ignore", divide="ignore"):
        return tot, (u - d) / tot


# -- detector maps ---------------------------------------------------------

@dataclass(frozen=True)
class DetectorMap:
    """Spin-analyzed counts per (pixel, wavelength) cell plus the incident flux.

    ``incident[p, l]`` is the flux that would have reached the cell without
    the sample; ``up``/``down`` are the analyzed reflected counts.
    """

    lambdas: np.ndarray
    pixels: np.ndarray
    up: np.ndarray
    down: np.ndarray
    incident: np.ndarray

    def __post_init__(self):
        shape = (len(self.pixels), len(self.lambdas))
        for name in ("up", "down", "incident"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def intensity(self) -> np.ndarray:
        return self.up + self.down

    @property
    def polarization(self) -> np.ndarray:
        tot = self.intensity
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, (self.up - self.down) / tot, np.nan)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for name in ("up", "down", "incident"):
            w.writerow([f"#{name}"] + [f"{v:.9g}" for v in self.lambdas])
            arr = getattr(self, name)
            for p, row in zip(self.pixels, arr):
                w.writerow([int(p)] + [f"{v:.9g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> DetectorMap:
        """Inverse of :meth:`to_csv`; lines starting with ``"# "`` are comments."""
        blocks: dict[str, list] = {}
        lambdas = None
        current = None
        lines = [ln for ln in text.splitlines() if not ln.startswith("# ")]
        for row in csv.reader(lines):
            if not row:
                continue
            if row[0].startswith("#"):
                current = row[0][1:]
                lam = np.array(row[1:], dtype=float)
                if lambdas is not None and not np.array_equal(lam, lambdas):
                    raise ValueError("inconsistent wavelength headers")
                lambdas = lam
                blocks[current] = []
            elif current is None:
                raise ValueError("detector map CSV must start with a '#<channel>' header row")
            else:
                blocks[current].append([float(v) for v in row])
        missing = {"up", "down", "incident"} - blocks.keys()
        if missing:
            raise ValueError(f"detector map CSV lacks blocks: {sorted(missing)}")
        arr = {k: np.array(v) for k, v in blocks.items()}
        pixels = arr["up"][:, 0].astype(int)
        return cls(lambdas, pixels, arr["up"][:, 1:], arr["down"][:, 1:], arr["incident"][:, 1:])


def pixel_profile(geom: DetectorGeometry, sigma_pixels: float = 3.0) -> np.ndarray:
    """Default illumination of the detector: Gaussian around the centre pixel, unit sum."""
    w = np.exp(-0.5 * ((geom.pixels - geom.center_pixel) / sigma_pixels) ** 2)
    return w / w.sum()


def simulate_detector_map(stack: LayerStack, beam: BeamConfig, geom: DetectorGeometry,
                          geometry=Geometry.PARALLEL, kernel: AngularKernel | None = None,
                          spectrum=None, profile=None, lossless: bool = False) -> DetectorMap:
    """Expected analyzed counts for every (pixel, wavelength) cell.

    Each pixel uses its own alpha_eff; ``kernel`` adds the residual angular
    spread within a pixel (delta by default).  ``spectrum`` is the incident
    flux per wavelength (ones by default) and ``profile`` its distribution
    over pixels.
    """
    kernel = AngularKernel.delta() if kernel is None else kernel
    lam = beam.lambdas
    spectrum = np.ones_like(lam) if spectrum is None else np.asarray(spectrum, dtype=float)
    profile = pixel_profile(geom) if profile is None else np.asarray(profile, dtype=float)
    a = alpha_eff(geom.z, geom, beam.alpha)
    up = np.empty((geom.n_pixels, lam.size))
    down = np.empty_like(up)
    for i, ai in enumerate(a):
        up[i], down[i] = analyzed_intensities(stack, lam, ai, geometry, kernel, lossless)
    incident = np.outer(profile, spectrum)
    return DetectorMap(lam, geom.pixels, up * incident, down * incident, incident)


# -- reduced curves --------------------------------------------------------

@dataclass(frozen=True)
class ReducedCurve:
    abscissa: np.ndarray
    value: np.ndarray
    sigma: np.ndarray | None = None
    provenance: str = ""
    missing: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.abscissa, dtype=float)
        if x.ndim != 1 or np.shape(self.value) != x.shape:
            raise ValueError("abscissa and value must be matching 1-D arrays")
        if self.sigma is not None and np.shape(self.sigma) != x.shape:
            raise ValueError("sigma must match abscissa")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("abscissa must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.provenance:
            buf.write(f"# provenance: {self.provenance}\n")
        if self.missing:
            buf.write("# missing: " + " ".join(f"{v:.9g}" for v in self.missing) + "\n")
        buf.write("abscissa,value,sigma\n")
        sig = self.sigma if self.sigma is not None else np.full(len(self.abscissa), np.nan)
        for x, v, s in zip(self.abscissa, self.value, sig):
            buf.write(f"{x:.9g},{v:.9g},{s:.9g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ReducedCurve:
        prov, missing, rows = "", (), []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("# provenance:"):
                prov = line.split(":", 1)[1].strip()
            elif line.startswith("# missing:"):
                missing = tuple(float(v) for v in line.split(":", 1)[1].split())
            elif line.startswith("#") or line.startswith("abscissa"):
                continue
            else:
                rows.append([float(v) for v in line.split(",")])
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        sigma = None if np.all(np.isnan(arr[:, 2])) else arr[:, 2]
        return cls(arr[:, 0], arr[:, 1], sigma, prov, missing)


def bin_constant_q(dmap: DetectorMap, geom: DetectorGeometry, alpha: float, q_grid,
                   observable: str = "P") -> ReducedCurve:
    """Accumulate cells into constant-q bins centred on ``q_grid``.

    Up and down counts are summed separately; P = (U - D) / (U + D) and
    R = (U + D) / incident are formed from the sums.  Bins that receive no
    cell (or no counts) are dropped and listed in ``missing``.
    """
    q_grid = np.asarray(q_grid, dtype=float)
    if q_grid.size < 2 or np.any(np.diff(q_grid) <= 0):
        raise ValueError("q_grid must be strictly increasing with at least 2 points")
    if np.any(dmap.up < 0) or np.any(dmap.down < 0):
        raise ValueError("intensities must be nonnegative")
    mids = 0.5 * (q_grid[1:] + q_grid[:-1])
    edges = np.concatenate([[q_grid[0] - (mids[0] - q_grid[0])], mids, [q_grid[-1] + (q_grid[-1] - mids[-1])]])
    z = geom.z[np.asarray(dmap.pixels, dtype=int)]
    q = q_from_pixel(z[:, None], dmap.lambdas[None, :], geom, alpha)
    idx = np.digitize(q.ravel(), edges) - 1
    inside = (idx >= 0) & (idx < q_grid.size)
    n = q_grid.size
    sums = [np.bincount(idx[inside], arr.ravel()[inside], n) for arr in (dmap.up, dmap.down, dmap.incident)]
    counts = np.bincount(idx[inside], minlength=n)
    u, d, inc = sums
    with np.errstate(invalid="ignore", divide="ignore"):
        q_mean = np.bincount(idx[inside], (dmap.incident * q).ravel()[inside], n) / inc
    if observable == "P":
        ok = (counts > 0) & (u + d > 0)
        tot = np.where(ok, u + d, 1.0)
        value = (u - d) / tot
        sigma = np.sqrt(4 * u * d / tot**3)
    elif observable == "R":
        ok = (counts > 0) & (inc > 0)
        inc_safe = np.where(ok, inc, 1.0)
        value = (u + d) / inc_safe
        sigma = np.sqrt(u + d) / inc_safe
    else:
        raise ValueError("observable must be 'P' or 'R'")
    return ReducedCurve(q_grid[ok], value[ok], sigma[ok], f"bin_constant_q:{observable}",
                        tuple(q_grid[~ok]), {"cells": counts[ok], "q_mean": q_mean[ok]})


def _check_cover(sample: ReducedCurve, lo: float, hi: float):
    x = sample.abscissa
    if x.min() < lo - 1e-12 or x.max() > hi + 1e-12:
        raise ValueError("reference does not cover the sample abscissa")


def normalize_polarization(sample: ReducedCurve, reference: ReducedCurve, degree: int = 2) -> ReducedCurve:
    """Divide by a Chebyshev (first kind) fit to the reference polarization."""
    xr = np.asarray(reference.abscissa, dtype=float)
    _check_cover(sample, xr.min(), xr.max())
    fit = chebyshev.Chebyshev.fit(xr, reference.value, degree)
    mapped = fit.mapparms()[0] + fit.mapparms()[1] * xr
    cond = float(np.linalg.cond(chebyshev.chebvander(mapped, degree)))
    p0 = fit(sample.abscissa)
    sig = None if sample.sigma is None else sample.sigma / np.abs(p0)
    resid = float(np.sqrt(np.mean((fit(xr) - reference.value) ** 2)))
    return ReducedCurve(sample.abscissa, sample.value / p0, sig, "normalize_polarization:chebyshev",
                        sample.missing, {"coef": fit.coef.tolist(), "cond": cond, "residual": resid})


def fit_log_linear(reference: ReducedCurve, window=(0.5, 1.0)):
    """Fit log I = a lambda + b over ``window``; returns (a, b)."""
    x = np.asarray(reference.abscissa, dtype=float)
    sel = (x >= window[0]) & (x <= window[1]) & (np.asarray(reference.value) > 0)
    if sel.sum() < 2:
        raise ValueError("fit window outside data range")
    a, b = np.polyfit(x[sel], np.log(np.asarray(reference.value)[sel]), 1)
    return float(a), float(b)


def _window_mean(x, y, window):
    sel = (x >= window[0]) & (x <= window[1])
    if not sel.any():
        raise ValueError("scale window outside data range")
    return float(np.mean(y[sel]))


def normalize_intensity(sample: ReducedCurve, reference: ReducedCurve, model=None,
                        fit_window=(0.5, 1.0), scale_window=(0.6, 0.75)) -> ReducedCurve:
    """Divide by exp(a lambda + b) fitted to the reference, then match a window mean.

    ``model`` supplies the target window mean: a ReducedCurve, a callable of
    wavelength, or None (target 1).
    """
    a, b = fit_log_linear(reference, fit_window)
    x = np.asarray(sample.abscissa, dtype=float)
    y = np.asarray(sample.value) / np.exp(a * x + b)
    if model is None:
        target = 1.0
    elif isinstance(model, ReducedCurve):
        target = _window_mean(np.asarray(model.abscissa), np.asarray(model.value), scale_window)
    else:
        grid = x[(x >= scale_window[0]) & (x <= scale_window[1])]
        if grid.size == 0:
            raise ValueError("scale window outside data range")
        target = float(np.mean(model(grid)))
    scale = target / _window_mean(x, y, scale_window)
    sig = None if sample.sigma is None else sample.sigma / np.exp(a * x + b) * scale
    return ReducedCurve(x, y * scale, sig, "normalize_intensity:loglinear", sample.missing,
                        {"a": a, "b": b, "scale": scale})
