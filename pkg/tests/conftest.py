"""Shared fixtures. The default dataset and fits are built once per session."""

import logging

import numpy as np
import pytest

from koopquad import koopman as km
from koopquad import lqr
from koopquad import quadsim as qs
from koopquad import reference as rf
from koopquad.cli import PipelineConfig


@pytest.fixture(scope="session")
def params():
    return qs.QuadParams()


@pytest.fixture(scope="session")
def default_config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def default_dataset(default_config, params):
    return rf.collect_dataset(default_config.train_specs(), default_config.pd_gains(), params)


@pytest.fixture(scope="session")
def tls_model(default_dataset):
    model, _ = km.fit(default_dataset, "dedup", "tls")
    return model


@pytest.fixture(scope="session")
def ls_model(default_dataset):
    model, _ = km.fit(default_dataset, "dedup", "ls")
    return model


@pytest.fixture(scope="session")
def tls_gain(tls_model, default_config):
    return lqr.design(tls_model, default_config.weights())


def random_lti(rng, n, l, rho=0.9):
    """Random stable ``(A0, B0)`` with spectral radius ``rho``."""
    A = rng.standard_normal((n, n))
    A *= rho / np.max(np.abs(np.linalg.eigvals(A)))
    return A, rng.standard_normal((n, l))


def simulate_lti(A, B, rng, T):
    """States ``X, X+`` and inputs ``U`` of ``x+ = A x + B u`` with Gaussian excitation."""
    n, l = B.shape
    U = rng.standard_normal((l, T))
    X = np.empty((n, T + 1))
    X[:, 0] = rng.standard_normal(n)
    for k in range(T):
        X[:, k + 1] = A @ X[:, k] + B @ U[:, k]
    return X[:, :-1], X[:, 1:], U


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
