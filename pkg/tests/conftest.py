"""Shared oracles and builders for the test suite."""

import numpy as np
import pytest

from odestab.netcore import CallableField, DenseLayer, VectorField, make_mlp_field


def central_diff(fn, arr, index, delta=1e-5):
    """Central finite difference of scalar fn w.r.t. one array coordinate."""
    orig = arr[index]
    arr[index] = orig + delta
    hi = fn()
    arr[index] = orig - delta
    lo = fn()
    arr[index] = orig
    return (hi - lo) / (2.0 * delta)


def rel_error(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def identity_field(dim=1, scale=1.0):
    """Linear autonomous field f(y) = scale * y."""
    layer = DenseLayer(scale * np.eye(dim), np.zeros(dim), "identity")
    return VectorField([layer])


def zero_field(dim=1):
    layer = DenseLayer(np.zeros((dim, dim)), np.zeros(dim), "identity")
    return VectorField([layer])


def callable_field(fn, dim, lipschitz=None):
    return CallableField(fn, dim, lipschitz=lipschitz)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
