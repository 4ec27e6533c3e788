"""Bounded damped least squares for a handful of stack and beam parameters.

Parameter names:

``im_rho_scale:<i>``
    multiplies the Im(rho) of layer i.
``thickness:<i>``
    thickness of layer i (nm).
``alpha_offset_deg``
    added to the incidence angle (degrees).
``rho_m_scale:<i>``
    multiplies the magnetic SLD of layer i, which moves the down-channel SLD.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .instrument import AngularKernel, ReducedCurve, model_curve
from .spinecho import Geometry
from .stack import LayerStack

_PARAM = re.compile(r"^(im_rho_scale|thickness|rho_m_scale):(\d+)$|^alpha_offset_deg$")


class FitError(RuntimeError):
    """Fit could not proceed (degenerate Jacobian or non-finite model)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class FitSpecError(ValueError):
    """Malformed fit specification."""


@dataclass(frozen=True)
class FitParameter:
    name: str
    lower: float
    upper: float
    init: float

    def __post_init__(self):
        if not _PARAM.match(self.name):
            raise ValueError(f"unknown fit parameter {self.name!r}")
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or self.lower >= self.upper:
            raise ValueError(f"{self.name}: bounds must be finite with min < max")
        if not self.lower <= self.init <= self.upper:
            raise ValueError(f"{self.name}: init outside [min, max]")


@dataclass(frozen=True)
class FitProblem:
    parameters: tuple[FitParameter, ...]
    target: ReducedCurve
    residual: str = "linear"

    def __post_init__(self):
        if not self.parameters:
            raise ValueError("need at least one free parameter")
        if self.residual not in ("linear", "log"):
            raise ValueError("residual must be 'linear' or 'log'")
        if self.residual == "log" and np.any(np.asarray(self.target.value) <= 0):
            raise ValueError("log residual needs a positive target")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parameters]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.parameters])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.parameters])

    def residuals(self, model: np.ndarray) -> np.ndarray:
        data = np.asarray(self.target.value, dtype=float)
        model = np.asarray(model, dtype=float)
        if self.residual == "log":
            with np.errstate(divide="ignore", invalid="ignore"):
                res = np.log(model) - np.log(data)
            sigma = None if self.target.sigma is None else self.target.sigma / data
        else:
            res = model - data
            sigma = self.target.sigma
        if sigma is not None:
            res = res / np.where(np.asarray(sigma) > 0, sigma, 1.0)
        return res


@dataclass(frozen=True)
class FitResult:
    values: dict
    residual_norm: float
    initial_norm: float
    iterations: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{k} = {v:.9g}" for k, v in self.values.items()]
        lines += [f"residual_norm = {self.residual_norm:.9g}",
                  f"initial_norm = {self.initial_norm:.9g}",
                  f"iterations = {self.iterations}",
                  f"converged = {str(self.converged).lower()}",
                  f"message = {self.message}"]
        return "\n".join(lines) + "\n"


def _as_dict(names, x) -> dict:
    return {n: float(v) for n, v in zip(names, x)}


def _jacobian(fun, x, r0, lower, upper):
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = 1e-7 * max(abs(x[i]), 1e-3 * (upper[i] - lower[i]))
        if x[i] + h > upper[i]:
            h = -h
        xp = x.copy()
        xp[i] += h
        jac[:, i] = (fun(xp) - r0) / h
    return jac


def fit(problem: FitProblem, forward: Callable[[dict], np.ndarray], max_iter: int = 200,
        ftol: float = 1e-8, xtol: float = 1e-10) -> FitResult:
    """Minimize the residual norm inside the parameter box.

    Levenberg-Marquardt with diag(J^T J) damping; trial points are clipped
    to the bounds and accepted only when the cost decreases.
    """
    names = problem.names
    lo, hi = problem.lower, problem.upper

    def fun(x):
        res = problem.residuals(forward(dict(zip(names, x))))
        if not np.all(np.isfinite(res)):
            raise FitError("non-finite residual from forward model")
        return res

    x = np.clip([p.init for p in problem.parameters], lo, hi).astype(float)
    r = fun(x)
    cost = float(r @ r)
    initial = np.sqrt(cost)
    trace = [(0, initial, x.copy())]
    if cost == 0.0:
        return FitResult(_as_dict(names, x), 0.0, 0.0, 0, True, "exact fit at initial point", trace)
    lam = 1e-3
    message, converged, it = "maximum iterations reached", False, 0
    for it in range(1, max_iter + 1):
        jac = _jacobian(fun, x, r, lo, hi)
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        if not np.all(np.isfinite(jtj)) or np.any(diag == 0):
            raise FitError("degenerate Jacobian", trace)
        grad = jac.T @ r
        accepted = False
        while lam < 1e16:
            try:
                step = -np.linalg.solve(jtj + lam * np.diag(diag), grad)
            except np.linalg.LinAlgError as exc:
                raise FitError("degenerate Jacobian", trace) from exc
            x_new = np.clip(x + step, lo, hi)
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            message, converged = "no further decrease possible", True
            break
        dx = np.abs(x_new - x)
        rel = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10, 1e-12)
        trace.append((it, np.sqrt(cost), x.copy()))
        if cost == 0.0 or rel < ftol:
            message, converged = "relative residual change below tolerance", True
            break
        if np.all(dx <= xtol * np.maximum(1.0, np.abs(x))):
            message, converged = "parameter step below tolerance", True
            break
    return FitResult(_as_dict(names, x), float(np.sqrt(cost)), float(initial), it, converged, message, trace)


def apply_parameters(stack: LayerStack, alpha: float, values: dict) -> tuple[LayerStack, float]:
    """Stack and incidence angle with fit parameters applied to the nominal ones."""
    for name, v in values.items():
        if name == "alpha_offset_deg":
            alpha = alpha + np.deg2rad(v)
            continue
        kind, idx = name.split(":")
        i = int(idx)
        if not 0 < i < len(stack) - 1:
            raise FitSpecError(f"{name}: layer index must address a finite layer")
        layer = stack[i]
        if kind == "im_rho_scale":
            stack = stack.replace_layer(i, im_rho=layer.im_rho * v)
        elif kind == "thickness":
            stack = stack.replace_layer(i, thickness=float(v))
        else:
            stack = stack.replace_layer(i, rho_m=layer.rho_m * v)
    return stack, alpha


@dataclass(frozen=True)
class StackCurveModel:
    """Forward model: smeared R or P_z versus wavelength for a perturbed stack."""

    stack: LayerStack
    alpha: float
    lambdas: np.ndarray
    geometry: Geometry = Geometry.PARALLEL
    observable: str = "R"
    kernel: AngularKernel | None = None

    def __call__(self, values: dict) -> np.ndarray:
        stack, alpha = apply_parameters(self.stack, self.alpha, values)
        r, p = model_curve(stack, self.lambdas, alpha, self.geometry, self.kernel)
        if self.observable == "R":
            return r
        if self.observable == "Pz":
            return p
        raise ValueError("observable must be 'R' or 'Pz'")


@dataclass(frozen=True)
class ScanResult:
    grid: np.ndarray
    residual_norm: np.ndarray


def scan(problem: FitProblem, name: str, grid, forward, fixed: dict | None = None) -> ScanResult:
    """Residual norm along one parameter with the others at ``fixed`` (default init)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size and np.any(np.diff(grid) <= 0):
        raise ValueError("scan grid must be increasing")
    base = {p.name: p.init for p in problem.parameters}
    base.update(fixed or {})
    out = np.empty(grid.size)
    for i, v in enumerate(grid):
        res = problem.residuals(forward({**base, name: float(v)}))
        out[i] = np.sqrt(res @ res)
    return ScanResult(grid, out)


def translation_check(reference, shifted, log_lambda):
    """Best translation of ``shifted`` onto ``reference`` on a uniform log-lambda grid.

    Returns ``(lag, shape_residual)``: the lag in log-lambda units that
    minimizes the rms difference, and the largest remaining difference over
    the overlap relative to the reference's peak-to-peak range.
    """
    x = np.asarray(log_lambda, dtype=float)
    a = np.asarray(reference, dtype=float) - np.mean(reference)
    b = np.asarray(shifted, dtype=float) - np.mean(shifted)
    dx = x[1] - x[0]
    corr = np.correlate(b, a, mode="full")
    guess = (np.argmax(corr) - (a.size - 1)) * dx
    span = np.ptp(reference)

    def moved(lag):
        inside = (x - lag >= x[0]) & (x - lag <= x[-1])
        return np.asarray(shifted)[inside] - np.interp(x[inside] - lag, x, reference)

    def rms(lag):
        return float(np.sqrt(np.mean(moved(lag) ** 2)))

    # the correlation peak only brackets the lag; refine on the rms misfit
    lags = guess + dx * np.arange(-20, 21)
    best = lags[int(np.argmin([rms(v) for v in lags]))]
    res = minimize_scalar(rms, bounds=(best - dx, best + dx), method="bounded", options={"xatol": 1e-6 * dx})
    return float(res.x), float(np.max(np.abs(moved(res.x))) / span)


def feature_position(lambdas, curve) -> float:
    """Wavelength of the deepest point of a dip."""
    return float(np.asarray(lambdas)[int(np.nanargmin(curve))])


# -- fit specification files -----------------------------------------------

@dataclass(frozen=True)
class FitSpec:
    stack_source: str
    free: tuple[FitParameter, ...]
    target_path: str
    residual: str = "linear"
    geometry: str = "par"
    observable: str = "R"
    kernel: str = "delta"
    alpha_deg: float | None = None


def parse_fitspec(text: str, base_dir: str | Path = ".") -> FitSpec:
    """Parse ``free``/``target`` lines plus optional ``stack``, ``geometry``,
    ``observable``, ``kernel`` and ``alpha_deg`` lines."""
    base = Path(base_dir)
    free, target, residual = [], None, "linear"
    opts: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = shlex.split(line)
        head, rest = tok[0], tok[1:]
        kv = dict(t.split("=", 1) for t in rest if "=" in t)
        pos = [t for t in rest if "=" not in t]
        try:
            if head == "free":
                if len(pos) != 1 or set(kv) != {"min", "max", "init"}:
                    raise ValueError("expected: free <name> min=<f> max=<f> init=<f>")
                free.append(FitParameter(pos[0], float(kv["min"]), float(kv["max"]), float(kv["init"])))
            elif head == "target":
                if len(pos) != 1 or set(kv) - {"residual"}:
                    raise ValueError("expected: target <csv_path> residual=<linear|log>")
                target = pos[0]
                residual = kv.get("residual", "linear")
                if residual not in ("linear", "log"):
                    raise ValueError("residual must be linear or log")
            elif head in ("stack", "geometry", "observable", "kernel"):
                if len(pos) != 1:
                    raise ValueError(f"expected: {head} <value>")
                opts[head] = pos[0]
            elif head == "alpha_deg":
                opts["alpha_deg"] = float(pos[0])
            else:
                raise ValueError(f"unknown directive {head!r}")
        except ValueError as exc:
            raise FitSpecError(f"fitspec line {lineno}: {exc}") from None
    if not free:
        raise FitSpecError("fitspec has no free parameters")
    if target is None:
        raise FitSpecError("fitspec has no target line")
    if "stack" not in opts:
        raise FitSpecError("fitspec has no stack line")
    src = opts.pop("stack")
    if not src.startswith("builtin:"):
        src = str(base / src)
    if opts.get("observable", "R") not in ("R", "Pz"):
        raise FitSpecError("observable must be R or Pz")
    return FitSpec(src, tuple(free), str(base / target), residual, **opts)
