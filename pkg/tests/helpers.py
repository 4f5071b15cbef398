"""Shared builders and parsers for the test suite."""

import re

import numpy as np

from acsindy.circuit import FeatureNormState, LayerSpec, build_model, freeze_norm, init_model
from acsindy.dynamics import Trajectory

VAR_NAMES = ("x", "y", "z")
_SUPER = str.maketrans("⁰¹²³⁴⁵⁶⁷⁸⁹", "0123456789")


def exact_nonlinear2d_model():
    """Circuit computing the 2D benchmark field exactly (norm off).

    Products are x*y and y*y; linear terms come through the skip path.
    Head columns: [xy, y^2, x, y, 1].
    """
    spec = LayerSpec(2, 4, 2)
    w = np.array([
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
    ])
    head = np.array([
        [0.0, 0.0, -0.1, 1.0, 0.0],
        [-0.5, -0.025, -2.0, -0.1, 0.0],
    ])
    return build_model([(spec, w)], head, skip=True)


def linear_decay_model(n=1, rate=1.0):
    """Circuit computing f(x) = -rate * x through the skip path only."""
    spec = LayerSpec(n, 2, 2)
    head = np.zeros((n, 1 + n + 1))
    head[:, 1:1 + n] = -rate * np.eye(n)
    return build_model([(spec, np.zeros((2, n + 1)))], head, skip=True)


def passthrough_norms(model):
    """Freeze every norm with sigma 0 so divisors are exactly 1."""
    for st in model.norms():
        n = st.sigma.shape[0]
        st.sigma = np.zeros(n)
        st.mean = np.zeros(n)
        st.m2 = np.zeros(n)
        st.count = 1
    return freeze_norm(model)


def random_model(rng, d, depth, skip, group_size=2, width=None):
    width = width or int(rng.integers(1, 3))
    specs, n_in = [], d
    for _ in range(depth):
        spec = LayerSpec(n_in, group_size * width, group_size)
        specs.append(spec)
        n_in = spec.out_dim
    return init_model(specs, d, seed=int(rng.integers(0, 2**31)), skip=skip)


def euler_trajectory(f, x0, dt, steps):
    """Forward-Euler samples of f starting at x0 (steps + 1 rows)."""
    x = np.array(x0, dtype=float)
    rows = [x.copy()]
    for _ in range(steps):
        x = x + dt * np.asarray(f(x), dtype=float)
        rows.append(x.copy())
    return Trajectory(np.arange(steps + 1) * dt, np.array(rows))


def fresh_norm_like(state):
    return FeatureNormState.fresh(state.sigma.shape[0], state.epsilon)


def central_difference(fun, arrays, h=1e-5):
    """Central finite differences of scalar ``fun()`` w.r.t. every entry of
    every array in ``arrays`` (perturbed in place and restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            lp = fun()
            a[i] = old - h
            lm = fun()
            a[i] = old
            g[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-8):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    err = np.abs(a - n)
    bound = np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), atol)
    bad = err > bound
    assert not bad.any(), (
        f"{int(bad.sum())} gradient entries off; worst |diff|={err.max():.3e}, "
        f"analytic={a[bad][:3]}, numeric={n[bad][:3]}"
    )


_TERM = re.compile(r"([+−-])?\s*([0-9]+\.[0-9]+)(?:·(.*))?$")


def parse_rendered(text, nvars=None):
    """Invert ``render``: list of {exponents: coefficient} per component."""
    lines = [ln for ln in text.splitlines() if ln.startswith("d")]
    nvars = nvars or len(lines)
    names = list(VAR_NAMES[:nvars]) if nvars <= 3 else [f"x{i + 1}" for i in range(nvars)]
    out = []
    for ln in lines:
        rhs = ln.split("=", 1)[1].strip()
        terms = {}
        if rhs != "0":
            pieces = re.split(r"\s(?=[+−]\s)", rhs)
            for piece in pieces:
                m = _TERM.match(piece.strip())
                if m is None:
                    raise ValueError(f"cannot parse term {piece!r}")
                sign = -1.0 if m.group(1) in ("−", "-") else 1.0
                coef = sign * float(m.group(2))
                exps = [0] * nvars
                if m.group(3):
                    for factor in m.group(3).split("·"):
                        base = factor.rstrip("⁰¹²³⁴⁵⁶⁷⁸⁹")
                        power = factor[len(base):].translate(_SUPER)
                        exps[names.index(base)] += int(power) if power else 1
                terms[tuple(exps)] = coef
        out.append(terms)
    return out
