import math

import mpmath
import numpy as np
import pytest

import giantgh
from giantgh.stack import Layer, LayerStack, spin_sld


@pytest.fixture(scope="session")
def table1():
    return giantgh.parse_config(giantgh.bundled("table1"))


@pytest.fixture(scope="session")
def stack(table1):
    return table1[0]


@pytest.fixture(scope="session")
def beam(table1):
    return table1[1]


@pytest.fixture(scope="session")
def nimo():
    return giantgh.parse_config(giantgh.bundled("nimo"))


def bare(rho, im_rho=0.0):
    """Vacuum on a single semi-infinite medium."""
    return LayerStack((Layer("vacuum", math.inf, 0.0), Layer("sub", math.inf, rho, im_rho=im_rho)))


def tmm_reflection(stack, channel, kz, dps=40):
    """Reflection coefficient from the characteristic-matrix product in extended precision.

    (psi, psi') is propagated through each layer with
    [[cos qd, sin(qd)/q], [-q sin qd, cos qd]] and matched to 1 + r incident
    and a single outgoing wave in the substrate.
    """
    with mpmath.workdps(dps):
        def q_of(rho):
            q = mpmath.sqrt(mpmath.mpf(kz) ** 2 - 4 * mpmath.pi * mpmath.mpc(rho.real, rho.imag))
            return -q if mpmath.im(q) < 0 else q

        m = mpmath.eye(2)
        for layer in list(stack)[1:-1]:
            q = q_of(spin_sld(layer, channel))
            d = mpmath.mpf(layer.thickness)
            c, s = mpmath.cos(q * d), mpmath.sin(q * d)
            m = mpmath.matrix([[c, s / q], [-q * s, c]]) * m
        q0, qs = q_of(spin_sld(stack[0], channel)), q_of(spin_sld(stack[-1], channel))
        a = 1j * qs * m[0, 0] - m[1, 0]
        b = -qs * q0 * m[0, 1] - 1j * q0 * m[1, 1]
        return complex(-(a + b) / (a - b))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20241016)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
