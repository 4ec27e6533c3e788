"""Sample and beam data model, and the line-oriented stack/beam file format.

Units: lengths in nm, scattering length densities (SLDs) in nm^-2, angles in
radians.  In the text format, ``rho_n``/``rho_m`` are written in units of
1e-4 nm^-2 and ``im_rho`` in units of 1e-7 nm^-2.

Spin convention: ``DOWN`` is the neutron state whose magnetic moment is
parallel to the layer magnetization, so it sees ``rho_n - rho_m``; ``UP``
sees ``rho_n + rho_m``.  With this choice the FeCoV down-spin SLD is close
to zero, which is what makes the lower FeCoV layer a waveguide for that
state.
"""

from __future__ import annotations

import enum
import math
import shlex
from dataclasses import dataclass, field, replace
from decimal import Decimal

import numpy as np

from .constants import HBAR, NEUTRON_MASS, NM

RHO_UNIT = 4  # file rho_n/rho_m are in 1e-4 nm^-2
IM_RHO_UNIT = 7  # file im_rho is in 1e-7 nm^-2


class StackError(ValueError):
    """Invalid stack or beam definition.

    ``line`` is the 1-based line of the configuration document (if known)
    and ``field`` names the offending field.
    """

    def __init__(self, message, *, line=None, field=None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        suffix = f" [{field}]" if field else ""
        super().__init__(f"{prefix}{message}{suffix}")


class SpinChannel(str, enum.Enum):
    UP = "up"
    DOWN = "down"

    @property
    def sign(self) -> int:
        return 1 if self is SpinChannel.UP else -1


@dataclass(frozen=True)
class Layer:
    """One slab of the sample.

    ``thickness`` is ``math.inf`` for the semi-infinite incident medium and
    substrate.  ``im_rho`` must be <= 0 (loss).  ``mag_dir`` is an in-plane
    unit vector ``(x, y)``; it defaults to +y for magnetic layers and is None
    for non-magnetic ones.
    """

    name: str
    thickness: float
    rho_n: float
    rho_m: float = 0.0
    im_rho: float = 0.0
    mag_dir: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.thickness >= 0):
            raise StackError("thickness must be >= 0", field=f"{self.name}.thickness")
        if self.im_rho > 0:
            raise StackError("gain medium not allowed (im_rho > 0)", field=f"{self.name}.im_rho")
        if self.rho_m < 0:
            raise StackError("rho_m is a magnitude and must be >= 0", field=f"{self.name}.rho_m")
        if self.rho_m > 0:
            mag = self.mag_dir if self.mag_dir is not None else (0.0, 1.0)
            mag = (float(mag[0]), float(mag[1]))
            if abs(math.hypot(*mag) - 1.0) > 1e-12:
                raise StackError("mag_dir must be a unit vector", field=f"{self.name}.mag_dir")
            object.__setattr__(self, "mag_dir", mag)
        else:
            object.__setattr__(self, "mag_dir", None)

    @property
    def semi_infinite(self) -> bool:
        return math.isinf(self.thickness)

    @property
    def magnetic(self) -> bool:
        return self.rho_m > 0


def spin_sld(layer: Layer, channel: SpinChannel) -> complex:
    """Complex SLD (nm^-2) seen by a neutron in ``channel``."""
    channel = SpinChannel(channel)
    return complex(layer.rho_n + channel.sign * layer.rho_m, layer.im_rho)


@dataclass(frozen=True)
class LayerStack:
    """Layers ordered from the incident medium (index 0) to the substrate."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 2:
            raise StackError("a stack needs an incident medium and a substrate", field="layers")
        amb = layers[0]
        if amb.rho_n != 0 or amb.rho_m != 0 or amb.im_rho != 0:
            raise StackError("incident medium must be vacuum (all SLDs zero)", field=f"{amb.name}")
        if not amb.semi_infinite:
            raise StackError("incident medium must be semi-infinite", field=f"{amb.name}.thickness")
        if not layers[-1].semi_infinite:
            raise StackError("last layer must be the substrate", field=f"{layers[-1].name}.thickness")
        for layer in layers[1:-1]:
            if layer.semi_infinite:
                raise StackError("only one substrate allowed, and it must be last", field=f"{layer.name}.thickness")
        dirs = {layer.mag_dir for layer in layers if layer.magnetic}
        if len(dirs) > 1:
            raise StackError("magnetized layers must share one mag_dir (collinear)", field="mag_dir")

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, index):
        return self.layers[index]

    def __iter__(self):
        return iter(self.layers)

    @property
    def substrate(self) -> Layer:
        return self.layers[-1]

    @property
    def mag_dir(self) -> tuple[float, float] | None:
        for layer in self.layers:
            if layer.magnetic:
                return layer.mag_dir
        return None

    def indices(self, name: str) -> list[int]:
        """Stack indices of all layers called ``name`` (top to bottom)."""
        return [i for i, layer in enumerate(self.layers) if layer.name == name]

    def replace_layer(self, index: int, **changes) -> LayerStack:
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return LayerStack(tuple(layers))

    def insert_layer(self, index: int, layer: Layer) -> LayerStack:
        layers = list(self.layers)
        layers.insert(index, layer)
        return LayerStack(tuple(layers))

    def lossless(self) -> LayerStack:
        """Copy of the stack with every imaginary SLD set to zero."""
        return LayerStack(tuple(replace(layer, im_rho=0.0) for layer in self.layers))

    def thicknesses(self) -> np.ndarray:
        """Thickness per layer with the semi-infinite ends set to 0."""
        return np.array([0.0 if layer.semi_infinite else layer.thickness for layer in self.layers])

    def slds(self, channel: SpinChannel) -> np.ndarray:
        return np.array([spin_sld(layer, channel) for layer in self.layers], dtype=complex)


@dataclass(frozen=True)
class BeamConfig:
    """Incident beam and spin-echo settings.

    ``alpha`` grazing angle (rad), ``lambda_grid`` wavelengths (nm),
    ``rf_frequency`` (Hz), ``flipper_separation`` (m), ``divergence_fwhm``
    (rad) and ``wavevector_spread`` (relative dk/k).
    """

    alpha: float
    lambda_grid: tuple[float, ...]
    rf_frequency: float = 0.0
    flipper_separation: float = 0.0
    quantization_axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    divergence_fwhm: float = 0.0
    wavevector_spread: float = 0.0
    _linspace: tuple[float, float, int] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        grid = tuple(float(x) for x in np.atleast_1d(self.lambda_grid))
        object.__setattr__(self, "lambda_grid", grid)
        if not self.alpha > 0:
            raise StackError("alpha must be > 0", field="alpha")
        if len(grid) == 0 or grid[0] <= 0:
            raise StackError("wavelengths must be > 0", field="lambda_grid")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise StackError("lambda_grid must be strictly increasing", field="lambda_grid")
        if self.wavevector_spread < 0:
            raise StackError("wavevector_spread must be >= 0", field="dk_over_k")
        if self.divergence_fwhm < 0:
            raise StackError("divergence_fwhm must be >= 0", field="div_fwhm_deg")

    @classmethod
    def from_range(cls, alpha, lambda_min, lambda_max, n_lambda, **kwargs) -> BeamConfig:
        grid = np.linspace(lambda_min, lambda_max, int(n_lambda))
        return cls(alpha, tuple(grid), _linspace=(lambda_min, lambda_max, int(n_lambda)), **kwargs)

    @property
    def lambdas(self) -> np.ndarray:
        return np.asarray(self.lambda_grid)

    @property
    def kz(self) -> np.ndarray:
        return kz_from_wavelength(self.lambdas, self.alpha)

    def with_alpha(self, alpha: float) -> BeamConfig:
        return replace(self, alpha=alpha)


def kz_from_wavelength(lam, alpha):
    """Normal wavevector component kz = (2 pi / lambda) sin(alpha), nm^-1."""
    return 2 * np.pi * np.sin(alpha) / np.asarray(lam, dtype=float)


def wavelength_from_kz(kz, alpha):
    return 2 * np.pi * np.sin(alpha) / np.asarray(kz, dtype=float)


def larmor_phase(beam: BeamConfig, lam):
    """Larmor phase theta_k = 2 f m lambda L / hbar (rad) at wavelength ``lam`` (nm)."""
    lam_m = np.asarray(lam, dtype=float) * NM
    return 2 * beam.rf_frequency * NEUTRON_MASS * lam_m * beam.flipper_separation / HBAR


def entanglement_length(beam: BeamConfig, lam):
    """Spin-echo length xi = theta_k lambda / (2 pi), in nm."""
    return larmor_phase(beam, lam) * np.asarray(lam, dtype=float) / (2 * np.pi)


# -- text format -----------------------------------------------------------

_LAYER_KEYS = {"rho_n", "rho_m", "im_rho", "mag"}
_BEAM_KEYS = {"alpha_deg", "lambda_min", "lambda_max", "n_lambda", "rf_mhz", "flipper_m",
              "div_fwhm_deg", "dk_over_k"}
_BEAM_REQUIRED = _BEAM_KEYS - {"div_fwhm_deg", "dk_over_k"}
_MAG_DIRS = {"x": (1.0, 0.0), "y": (0.0, 1.0), "-x": (-1.0, 0.0), "-y": (0.0, -1.0)}


def _scaled(text: str, exponent: int) -> float:
    # exact decimal shift so that render -> parse round-trips bit-for-bit
    return float(Decimal(text).scaleb(-exponent))


def _unscaled(value: float, exponent: int) -> str:
    d = Decimal(repr(float(value))).scaleb(exponent).normalize()
    text = format(d, "f") if abs(d.adjusted()) < 12 else str(d)
    return "0" if text in ("-0", "0") else text


def _keyvals(tokens, allowed, lineno):
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not value:
            raise StackError(f"expected key=value, got {tok!r}", line=lineno)
        if key not in allowed:
            raise StackError(f"unknown key {key!r}", line=lineno, field=key)
        if key in out:
            raise StackError(f"duplicate key {key!r}", line=lineno, field=key)
        out[key] = value
    return out


def _number(text, lineno, key):
    try:
        Decimal(text)
        value = float(text)
    except Exception:
        raise StackError(f"not a number: {text!r}", line=lineno, field=key) from None
    if not math.isfinite(value):
        raise StackError(f"not a finite number: {text!r}", line=lineno, field=key)
    return value


def _parse_layer(tokens, lineno, first):
    if len(tokens) < 3:
        raise StackError("layer needs a name, a thickness and rho_n=", line=lineno)
    name, thick_tok = tokens[0], tokens[1]
    kv = _keyvals(tokens[2:], _LAYER_KEYS, lineno)
    if "rho_n" not in kv:
        raise StackError("missing rho_n", line=lineno, field="rho_n")
    for key in ("rho_n", "rho_m", "im_rho"):
        if key in kv:
            _number(kv[key], lineno, key)
    rho_n = _scaled(kv["rho_n"], RHO_UNIT)
    rho_m = _scaled(kv.get("rho_m", "0"), RHO_UNIT)
    im_rho = _scaled(kv.get("im_rho", "0"), IM_RHO_UNIT)
    if thick_tok == "substrate":
        thickness = math.inf
    elif thick_tok == "ambient" or (first and thick_tok in ("0", "inf")):
        if not first:
            raise StackError("only the first layer can be the incident medium", line=lineno,
                             field="thickness")
        thickness = math.inf
    else:
        thickness = _number(thick_tok, lineno, "thickness")
        if thickness <= 0:
            raise StackError("finite layers need thickness > 0", line=lineno, field="thickness")
    mag = None
    if "mag" in kv:
        if kv["mag"] not in _MAG_DIRS:
            raise StackError(f"mag must be one of {sorted(_MAG_DIRS)}", line=lineno, field="mag")
        mag = _MAG_DIRS[kv["mag"]]
    try:
        return Layer(name, thickness, rho_n, rho_m, im_rho, mag)
    except StackError as exc:
        raise StackError(str(exc), line=lineno, field=exc.field) from None


def _parse_beam(tokens, lineno):
    kv = _keyvals(tokens, _BEAM_KEYS, lineno)
    missing = sorted(_BEAM_REQUIRED - set(kv))
    if missing:
        raise StackError(f"beam is missing {', '.join(missing)}", line=lineno, field=missing[0])
    vals = {k: _number(v, lineno, k) for k, v in kv.items()}
    n = vals["n_lambda"]
    if n != int(n) or n < 1:
        raise StackError("n_lambda must be a positive integer", line=lineno, field="n_lambda")
    if n > 1 and vals["lambda_max"] <= vals["lambda_min"]:
        raise StackError("lambda_max must exceed lambda_min", line=lineno, field="lambda_max")
    try:
        return BeamConfig.from_range(
            math.radians(vals["alpha_deg"]), vals["lambda_min"], vals["lambda_max"], int(n),
            rf_frequency=vals["rf_mhz"] * 1e6,
            flipper_separation=vals["flipper_m"],
            divergence_fwhm=math.radians(vals.get("div_fwhm_deg", 0.0)),
            wavevector_spread=vals.get("dk_over_k", 0.0),
        )
    except StackError as exc:
        raise StackError(str(exc), line=lineno, field=exc.field) from None


def parse_config(text: str) -> tuple[LayerStack | None, BeamConfig | None]:
    """Parse a configuration document holding ``layer`` and/or ``beam`` lines."""
    layers = []
    beam = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise StackError(f"syntax error: {exc}", line=lineno) from None
        kind, rest = tokens[0], tokens[1:]
        if kind == "layer":
            layers.append(_parse_layer(rest, lineno, first=not layers))
        elif kind == "beam":
            if beam is not None:
                raise StackError("more than one beam line", line=lineno)
            beam = _parse_beam(rest, lineno)
        else:
            raise StackError(f"unknown directive {kind!r}", line=lineno)
    stack = LayerStack(tuple(layers)) if layers else None
    return stack, beam


def parse_stack(text: str) -> LayerStack:
    stack, _ = parse_config(text)
    if stack is None:
        raise StackError("document contains no layer lines", field="layers")
    return stack


def parse_beam(text: str) -> BeamConfig:
    _, beam = parse_config(text)
    if beam is None:
        raise StackError("document contains no beam line", field="beam")
    return beam


def render_stack(stack: LayerStack) -> str:
    lines = []
    for i, layer in enumerate(stack):
        if i == 0:
            thick = "ambient"
        elif layer.semi_infinite:
            thick = "substrate"
        else:
            thick = repr(float(layer.thickness))
        parts = ["layer", shlex.quote(layer.name), thick, f"rho_n={_unscaled(layer.rho_n, RHO_UNIT)}"]
        if layer.rho_m:
            parts.append(f"rho_m={_unscaled(layer.rho_m, RHO_UNIT)}")
        if layer.im_rho:
            parts.append(f"im_rho={_unscaled(layer.im_rho, IM_RHO_UNIT)}")
        if layer.magnetic and layer.mag_dir != (0.0, 1.0):
            for key, vec in _MAG_DIRS.items():
                if vec == layer.mag_dir:
                    parts.append(f"mag={key}")
                    break
            else:
                raise StackError("only axis-aligned mag_dir can be rendered", field="mag_dir")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def render_beam(beam: BeamConfig) -> str:
    if beam._linspace is None:
        raise StackError("only evenly spaced wavelength grids can be rendered", field="lambda_grid")
    lo, hi, n = beam._linspace
    parts = [
        "beam",
        f"alpha_deg={math.degrees(beam.alpha)!r}",
        f"lambda_min={lo!r}",
        f"lambda_max={hi!r}",
        f"n_lambda={n}",
        f"rf_mhz={beam.rf_frequency / 1e6!r}",
        f"flipper_m={beam.flipper_separation!r}",
    ]
    if beam.divergence_fwhm:
        parts.append(f"div_fwhm_deg={math.degrees(beam.divergence_fwhm)!r}")
    if beam.wavevector_spread:
        parts.append(f"dk_over_k={beam.wavevector_spread!r}")
    return " ".join(parts) + "\n"
