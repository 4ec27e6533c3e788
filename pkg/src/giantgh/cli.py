"""Command-line front end.

Every subcommand writes one CSV whose ``#`` header lines carry a manifest
hash over the command, the input file digests and the resolved parameters,
plus a ``<out>.manifest.json`` side file with the same information and a
timestamp.  Data files themselves never contain timestamps, so identical
inputs give byte-identical CSVs.

Exit codes: 0 success, 2 parse/validation error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, bundled
from .fitting import FitError, FitProblem, StackCurveModel, fit, parse_fitspec
from .ghshift import ach_shift, dwell_time, phase_curve, shift_from_dwell
from .instrument import (DetectorGeometry, ReducedCurve, bin_constant_q, make_kernel,
                         model_curve, simulate_detector_map)
from .parratt import absorption_direct, reflectance
from .spinecho import Geometry, rtilde_perp, rtilde_perp_gaussian
from .stack import StackError, kz_from_wavelength, parse_config, wavelength_from_kz

EXIT_OK, EXIT_PARSE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class _Inputs:
    """Loaded configuration plus the digests that go into the manifest."""

    def __init__(self):
        self.digests: dict[str, str] = {}

    def read(self, source: str) -> str:
        if source.startswith("builtin:"):
            text = bundled(source.split(":", 1)[1])
        else:
            text = Path(source).read_text()
        self.digests[source] = hashlib.sha256(text.encode()).hexdigest()
        return text


def _load(args, inputs: _Inputs):
    stack, beam = parse_config(inputs.read(args.stack))
    if args.beam:
        _, beam = parse_config(inputs.read(args.beam))
    if stack is None:
        raise StackError("no layer lines in --stack input")
    if beam is None:
        raise StackError("no beam line found (give --beam or add one to the stack file)")
    return stack, beam


def _manifest(command: str, inputs: _Inputs, params: dict) -> tuple[str, dict]:
    body = {"command": command, "inputs": dict(sorted(inputs.digests.items())),
            "params": params, "version": __version__}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return digest, body


def _write_csv(out: str, command: str, inputs: _Inputs, params: dict, columns: dict):
    digest, body = _manifest(command, inputs, params)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    lines = [f"# giantgh {__version__} {command}", f"# manifest sha256:{digest}", ",".join(names)]
    lines += [",".join(f"{v:.9g}" for v in row) for row in data]
    _emit(out, "\n".join(lines) + "\n", digest, body)


def _emit(out: str, text: str, digest: str, body: dict, extra_outputs=()):
    Path(out).write_text(text)
    side = dict(body, manifest_sha256=digest, outputs=[out, *extra_outputs],
                timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat())
    Path(out + ".manifest.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def _common_params(args, beam) -> dict:
    return {"alpha_rad": beam.alpha, "lambda_min": beam.lambda_grid[0], "lambda_max": beam.lambda_grid[-1],
            "n_lambda": len(beam.lambda_grid), "geometry": args.geometry, "kernel": args.kernel,
            "lossless_phase": args.lossless_phase}


def cmd_reflectivity(args) -> int:
    inputs = _Inputs()
    stack, beam = _load(args, inputs)
    lam, kz = beam.lambdas, beam.kz
    cols = {"lambda_nm": lam, "kz_inv_nm": kz,
            "R_up": reflectance(stack, "up", kz).reflectivity,
            "R_down": reflectance(stack, "down", kz).reflectivity,
            "A_up": absorption_direct(stack, "up", kz),
            "A_down": absorption_direct(stack, "down", kz)}
    _write_csv(args.out, "reflectivity", inputs, _common_params(args, beam), cols)
    return EXIT_OK


def cmd_ghshift(args) -> int:
    inputs = _Inputs()
    stack, beam = _load(args, inputs)
    lossless = args.lossless_phase == "on"
    kz = np.sort(beam.kz)
    cols = {"kz_inv_nm": kz,
            "phase_up_rad": phase_curve(stack, "up", kz, lossless).phase,
            "phase_down_rad": phase_curve(stack, "down", kz, lossless).phase}
    up = ach_shift(stack, "up", kz, beam.alpha, lossless)
    down = ach_shift(stack, "down", kz, beam.alpha, lossless)
    tir = {ch: reflectance(stack.lossless(), ch, kz).reflectivity > 1 - 1e-9 for ch in ("up", "down")}
    cols.update(delta_up_nm=up, delta_down_nm=down, delta_rel_nm=down - up,
                tau_down_s=dwell_time(stack, "down", kz),
                total_reflection_up=tir["up"], total_reflection_down=tir["down"])
    if not (tir["up"].any() or tir["down"].any()):
        print("giantgh: note: no total reflection on this grid; shifts are not GH shifts", file=sys.stderr)
    _write_csv(args.out, "ghshift", inputs, _common_params(args, beam), cols)
    return EXIT_OK


def cmd_dwell(args) -> int:
    inputs = _Inputs()
    stack, beam = _load(args, inputs)
    kz = np.sort(beam.kz)
    cols = {"kz_inv_nm": kz, "lambda_nm": wavelength_from_kz(kz, beam.alpha),
            "tau_up_s": dwell_time(stack, "up", kz), "tau_down_s": dwell_time(stack, "down", kz),
            "shift_dwell_up_nm": shift_from_dwell(stack, "up", kz, beam.alpha),
            "shift_dwell_down_nm": shift_from_dwell(stack, "down", kz, beam.alpha),
            "A_up": absorption_direct(stack, "up", kz), "A_down": absorption_direct(stack, "down", kz)}
    _write_csv(args.out, "dwell", inputs, _common_params(args, beam), cols)
    return EXIT_OK


def cmd_polarization(args) -> int:
    inputs = _Inputs()
    stack, beam = _load(args, inputs)
    geom = DetectorGeometry()
    kernel = make_kernel(args.kernel, geom, beam)
    lam = beam.lambdas
    r_par, p_par = model_curve(stack, lam, beam.alpha, Geometry.PARALLEL, kernel)
    r_perp, p_perp = model_curve(stack, lam, beam.alpha, Geometry.PERPENDICULAR, kernel)
    params = _common_params(args, beam)
    _write_csv(args.out, "polarization", inputs, params,
               {"lambda_nm": lam, "Pz_par": p_par, "Pz_perp": p_perp, "R_par": r_par, "R_perp": r_perp})
    if args.rtilde_trace:
        # collimated and k-spread R~ for n = x across the wavelength grid
        kz = kz_from_wavelength(lam, beam.alpha)
        up, down = reflectance(stack, "up", kz), reflectance(stack, "down", kz)
        k = 2 * np.pi / lam
        xi = args.xi_coef * lam**2
        spread = beam.wavevector_spread or 0.01
        _write_csv(args.rtilde_trace, "polarization:rtilde", inputs, dict(params, xi_coef=args.xi_coef, dk_over_k=spread),
                   {"lambda_nm": lam, "theta_k": k * xi,
                    "Rtilde_perp": rtilde_perp(up.r_amp, down.r_amp, k, xi),
                    "R_perp_spread": rtilde_perp_gaussian(up.r_amp, down.r_amp, k, xi, spread)})
    return EXIT_OK


def cmd_detector_map(args) -> int:
    inputs = _Inputs()
    stack, beam = _load(args, inputs)
    geom = DetectorGeometry()
    kernel = make_kernel(args.kernel, geom, beam)
    dmap = simulate_detector_map(stack, beam, geom, Geometry(args.geometry), kernel)
    digest, body = _manifest("detector-map", inputs, _common_params(args, beam))
    text = f"# giantgh {__version__} detector-map\n# manifest sha256:{digest}\n" + dmap.to_csv()
    extra = []
    if args.binned:
        q = np.linspace(args.q_min, args.q_max, args.n_q)
        curve = bin_constant_q(dmap, geom, beam.alpha, q, args.observable)
        Path(args.binned).write_text(f"# manifest sha256:{digest}\n" + curve.to_csv())
        extra.append(args.binned)
    _emit(args.out, text, digest, body, extra)
    return EXIT_OK


def cmd_fit(args) -> int:
    inputs = _Inputs()
    spec_path = Path(args.spec)
    spec = parse_fitspec(inputs.read(str(spec_path)), spec_path.parent)
    stack, beam = parse_config(inputs.read(spec.stack_source))
    if stack is None or (beam is None and spec.alpha_deg is None):
        raise StackError("fit stack needs layer lines and either a beam line or alpha_deg")
    alpha = np.deg2rad(spec.alpha_deg) if spec.alpha_deg is not None else beam.alpha
    target = ReducedCurve.from_csv(inputs.read(spec.target_path))
    kernel = make_kernel(spec.kernel, DetectorGeometry(), beam)
    forward = StackCurveModel(stack, alpha, np.asarray(target.abscissa), Geometry(spec.geometry),
                              spec.observable, kernel)
    problem = FitProblem(spec.free, target, spec.residual)
    result = fit(problem, forward)
    params = {"free": [p.name for p in spec.free], "residual": spec.residual, "geometry": spec.geometry,
              "observable": spec.observable, "kernel": spec.kernel, "alpha_rad": alpha}
    digest, body = _manifest("fit", inputs, params)
    curve_path = args.out + ".curve.csv"
    model = forward(result.values)
    Path(curve_path).write_text(
        f"# manifest sha256:{digest}\nlambda_nm,target,model\n"
        + "".join(f"{x:.9g},{y:.9g},{m:.9g}\n" for x, y, m in zip(target.abscissa, target.value, model)))
    _emit(args.out, f"# giantgh {__version__} fit\n# manifest sha256:{digest}\n" + result.to_text(),
          digest, body, [curve_path])
    return EXIT_OK if result.converged else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="giantgh", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"giantgh {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stack=True):
        if stack:
            p.add_argument("--stack", required=True, help="stack file, or builtin:table1 / builtin:nimo")
            p.add_argument("--beam", help="file with a beam line (default: the one in --stack)")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--geometry", choices=["par", "perp"], default="par")
        p.add_argument("--kernel", choices=["delta", "tophat", "trapezoid", "gauss"], default="delta")
        p.add_argument("--lossless-phase", choices=["on", "off"], default="on")

    handlers = {
        "reflectivity": (cmd_reflectivity, "spin-resolved reflectivity and absorption"),
        "ghshift": (cmd_ghshift, "reflection phases, GH shifts and dwell time"),
        "polarization": (cmd_polarization, "P_z and R in both geometries"),
        "detector-map": (cmd_detector_map, "simulated (pixel, wavelength) detector map"),
        "dwell": (cmd_dwell, "dwell times and dwell-based shifts"),
    }
    for name, (func, help_) in handlers.items():
        p = sub.add_parser(name, help=help_)
        common(p)
        p.set_defaults(func=func)
        if name == "polarization":
            p.add_argument("--rtilde-trace", help="also write collimated/spread R~ (n = x) to this CSV")
            p.add_argument("--xi-coef", type=float, default=200.0, help="xi = coef * lambda^2 (nm^-1)")
        if name == "detector-map":
            p.add_argument("--binned", help="also write the constant-q reduced curve here")
            p.add_argument("--observable", choices=["P", "R"], default="P")
            p.add_argument("--q-min", type=float, default=0.05)
            p.add_argument("--q-max", type=float, default=0.2)
            p.add_argument("--n-q", type=int, default=300)

    p = sub.add_parser("fit", help="fit stack parameters to a reduced curve")
    p.add_argument("spec", help="fit specification file")
    common(p, stack=False)
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    try:
        return args.func(args)
    except OSError as exc:
        print(f"giantgh: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StackError, ValueError) as exc:
        print(f"giantgh: invalid input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FitError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"giantgh: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
