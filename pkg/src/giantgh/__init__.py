"""Spin-resolved neutron reflection from magnetic multilayers: Parratt
reflectance, Goos-Hanchen shifts, dwell times and spin-echo observables."""

from importlib import resources

from .stack import (
    BeamConfig,
    Layer,
    LayerStack,
    SpinChannel,
    StackError,
    parse_beam,
    parse_config,
    parse_stack,
    render_stack,
    spin_sld,
)

__version__ = "0.1.0"


def bundled(name: str) -> str:
    """Text of a bundled configuration file (``"table1"`` or ``"nimo"``)."""
    return resources.files(__package__).joinpath("data", f"{name}.stack").read_text()


__all__ = [
    "BeamConfig",
    "Layer",
    "LayerStack",
    "SpinChannel",
    "StackError",
    "bundled",
    "parse_beam",
    "parse_config",
    "parse_stack",
    "render_stack",
    "spin_sld",
]
