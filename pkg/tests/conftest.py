import re

import numpy as np
import pytest
from hypothesis import settings

from tissue_maturation import tensor_core as tc
from tissue_maturation.constitutive import GaussPointState, table1_params, table2_params

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def random_spd(rng, n, spread=0.15):
    A = rng.normal(scale=spread, size=(n, 3, 3))
    return tc.exp_sym(tc.sym(A))


def random_F(rng, n, spread=0.2):
    F = np.eye(3) + rng.normal(scale=spread, size=(n, 3, 3))
    bad = tc.det(F) <= 0.2
    while np.any(bad):
        F[bad] = np.eye(3) + rng.normal(scale=spread, size=(int(bad.sum()), 3, 3))
        bad = tc.det(F) <= 0.2
    return F


def random_state(rng, n, rho_max=40.0, spread=0.15):
    a = tc.normalize(rng.normal(size=(n, 3)))
    return GaussPointState(
        U_gm=random_spd(rng, n, spread), U_gco=random_spd(rng, n, spread), a_tilde=a,
        gamma_dot=rng.normal(scale=0.01, size=n), rho_co0=rng.uniform(0, rho_max, n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def p1():
    return table1_params()


@pytest.fixture
def p2():
    return table2_params()


def _sub(text, pattern, repl):
    out, n = re.subn(pattern, repl, text, flags=re.M)
    assert n, pattern
    return out


def strip_text(nx=4, ny=1, nz=1, horizon=1.0, snapshots=None, extra_params=None):
    """The strip preset shrunk to a few elements and a short horizon."""
    from tissue_maturation.scenarios_io import preset_text

    t = preset_text("strip_table1")
    t = _sub(t, r"(?s)^nx = .*?^nz = \d+$", f"nx = {nx}\nny = {ny}\nnz = {nz}")
    t = _sub(t, r'^horizon = .*$', f'horizon = "{horizon} days"')
    for key, val in (extra_params or {}).items():
        t = _sub(t, rf"^{key} = .*$", f"{key} = {val}")
    if snapshots is not None:
        items = ", ".join(f'"{s} days"' for s in snapshots)
        t = _sub(t, r"^\[outputs\]$", f"[outputs]\nsnapshot_times = [{items}]")
    return t


def cruciform_text(horizon=14.0, time=8.0, mode="force", extra_params=None):
    """A 17-element cruciform with a perturbation."""
    from tissue_maturation.scenarios_io import preset_text

    t = preset_text("cruciform_table2")
    t = _sub(t, r"(?s)^\[geometry\].*?^thickness_div = \d+$", "\n".join([
        "[geometry]", 'arm_length = "3.5 mm"', 'arm_width = "1 mm"', 'thickness = "1 mm"',
        'center_width = "3 mm"', "center_div = 3", "arm_width_div = 1", "arm_div = 2",
        "thickness_div = 1"]))
    t = _sub(t, r'^horizon = .*$', f'horizon = "{horizon} days"')
    t = _sub(t, r'^time = .*$', f'time = "{time} days"')
    t = _sub(t, r'^mode = "(force|displacement)"$', f'mode = "{mode}"')
    for key, val in (extra_params or {}).items():
        t = _sub(t, rf"^{key} = .*$", f"{key} = {val}")
    return t


def point_text(F=((1.0, 0, 0), (0, 1.0, 0), (0, 0, 1.0)), horizon=28.0, dt=0.1, angle=45.0,
               extra_params=None):
    """The material-point preset with a constant F and chosen stepping."""
    from tissue_maturation.scenarios_io import preset_text

    t = preset_text("point_uniaxial")
    rows = ", ".join("[" + ", ".join(repr(float(x)) for x in r) + "]" for r in F)
    t = _sub(t, r"^  \{ time = .*$", f'  {{ time = "0 days", F = [{rows}] }},')
    t = _sub(t, r"^horizon = .*$", f'horizon = "{horizon} days"')
    t = _sub(t, r"^dt_base = .*$", f'dt_base = "{dt} days"')
    t = _sub(t, r"^dt_max = .*$", f'dt_max = "{dt} days"')
    t = _sub(t, r"^angle = .*$", f'angle = "{angle} deg"')
    for key, val in (extra_params or {}).items():
        t = _sub(t, rf"^{key} = .*$", f"{key} = {val}")
    return t


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
