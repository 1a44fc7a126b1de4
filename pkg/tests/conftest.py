import math

import numpy as np
import pytest

from quartzion.model import ModelParams, MomentVector

NU_RF = 2.6897e6
S_NOISE = 3.101e-18
V0 = 4e-11


def nominal_params(**kw) -> ModelParams:
    args = dict(nu_rf=NU_RF, nu_ion_offset=1.35, nu_q_offset=1.99, gamma_ion_hz=0.0,
                gamma_q_hz=39.81, g_hz=1.449, n_ion=2.32e6, n_q=2.32e6, v0=V0)
    args.update(kw)
    return ModelParams.from_offsets(**args)


def random_params(rng, driven=False, **kw) -> ModelParams:
    args = dict(
        nu_rf=NU_RF, nu_ion_offset=rng.uniform(-5, 5), nu_q_offset=rng.uniform(-5, 5),
        gamma_ion_hz=rng.uniform(0.5, 50), gamma_q_hz=rng.uniform(5, 80),
        g_hz=rng.uniform(0.1, 5), g_arg=rng.uniform(-math.pi, math.pi),
        n_ion=rng.uniform(1e5, 5e6), n_q=rng.uniform(1e5, 5e6), v0=V0,
    )
    if driven:
        args.update(f_ion=rng.uniform(1, 100), f_q=rng.uniform(1, 100),
                    phi_ion=rng.uniform(-math.pi, math.pi), phi_q=rng.uniform(-math.pi, math.pi))
    args.update(kw)
    return ModelParams.from_offsets(**args)


@pytest.fixture
def nominal():
    return nominal_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ringing_state():
    """Moments when the drive stops: |a| = 1e4, |b| = 1e7, delta = -150 deg."""
    return MomentVector.from_polar(1e4, math.radians(-150), 1e7, 0.0)
