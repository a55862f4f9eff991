import numpy as np
import pytest

from rws.layers import make_layer
from rws.model import build_models
from rws.numerics import make_rng


def random_layer(family, n_out, n_in, rng, scale=1.0, n_hidden=3):
    layer = make_layer(family, n_out, n_in, rng=rng, n_hidden=n_hidden)
    for name, v in layer.params.items():
        v[...] = scale * rng.normal(size=v.shape)
    if family == "arsbn":
        layer.params["S"] *= layer.mask
    return layer


def random_pair(widths, n_visible, rng, p_family="sbn", q_family="sbn", scale=1.0, n_hidden=3):
    p, q = build_models(widths, n_visible, p_family, q_family, rng=rng, nade_hidden=n_hidden)
    for stack in (p, q):
        for layer in stack.layers:
            for v in layer.params.values():
                v[...] = scale * rng.normal(size=v.shape)
            if layer.family == "arsbn":
                layer.params["S"] *= layer.mask
    return p, q


def finite_difference(f, params: dict, eps=1e-5):
    """Central differences of scalar f() w.r.t. every entry of every array in params."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            up = f()
            arr[i] = old - eps
            down = f()
            arr[i] = old
            g[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def bits(n_rows, width, rng):
    return (rng.random((n_rows, width)) < 0.5).astype(float)


@pytest.fixture
def rng():
    return make_rng(12345, 0)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
