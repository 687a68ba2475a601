import pytest

from shelab.model import InitialData, SigmaSpec, SimConfig


@pytest.fixture
def triangle():
    return InitialData(kind="triangle", K=1.0, height=1.0)


@pytest.fixture
def pam_sigma():
    return SigmaSpec.linear(1.0)


@pytest.fixture
def zero_sigma():
    return SigmaSpec.linear(0.0)


def make_config(sigma=None, init=None, x_max=10.0, nx=200, dt=0.0025, t_end=1.0,
                snapshot_times=(1.0,), seed=123, kappa=1.0):
    return SimConfig(
        kappa=kappa,
        sigma=sigma if sigma is not None else SigmaSpec.linear(1.0),
        init=init if init is not None else InitialData("triangle", 1.0, 1.0),
        x_max=x_max, nx=nx, dt=dt, t_end=t_end,
        snapshot_times=snapshot_times, seed=seed,
    )


@pytest.fixture
def small_cfg():
    return make_config()
