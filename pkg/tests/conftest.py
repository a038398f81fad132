import numpy as np
import pytest

from nonlocal_rothe.core import Grid, GridFunction, SolverConfig, TimeGrid
from nonlocal_rothe.kernel import assemble
from nonlocal_rothe.operator import NonlocalOperator
from nonlocal_rothe.stepper import AnalyticSource, solve


def bump(x):
    return np.exp(-40.0 * (x - 0.5) ** 2)


@pytest.fixture
def make_operator():
    def build(m=32, s=0.4, p=2.0, a=0.0, b=1.0, **kwargs):
        cfg = SolverConfig(s=s, p=p)
        kw = assemble(Grid.uniform(a, b, m), cfg, **kwargs)
        return NonlocalOperator.from_config(kw, cfg), cfg

    return build


@pytest.fixture
def make_run(make_operator):
    """Solve on (0,1) with a Gaussian bump u0 and constant source; returns (traj, op, f, cfg)."""

    def run(m=32, n_steps=16, p=2.0, s=0.4, t_end=0.5, u0=bump, source=0.5, **cfg_kwargs):
        op, _ = make_operator(m=m, s=s, p=p)
        cfg = SolverConfig(s=s, p=p, **cfg_kwargs)
        f = source if isinstance(source, AnalyticSource) else AnalyticSource.constant(source)
        start = GridFunction.sample(op.grid, u0)
        traj = solve(start, f, TimeGrid(t_end, n_steps), op, cfg)
        return traj, op, f, cfg

    return run


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
