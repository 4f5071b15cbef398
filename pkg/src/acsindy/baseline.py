"""Classic SINDy baseline: polynomial library + STLSQ, and parameter-count formulas."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory
from .errors import ArgumentError
from .symbolic import Polynomial, SymbolicSystem, monomials

INT64_MAX = 2**63 - 1


@dataclass
class Library:
    theta: np.ndarray       # (samples, features)
    labels: list            # exponent tuples, graded-lex, constant first


def build_library(states, degree: int) -> Library:
    """All monomials of total degree <= ``degree`` evaluated on ``states``."""
    if degree < 1:
        raise ArgumentError("library degree must be >= 1")
    X = np.atleast_2d(np.asarray(states, dtype=float))
    labels = monomials(X.shape[1], degree)
    theta = np.empty((X.shape[0], len(labels)))
    for j, mono in enumerate(labels):
        col = np.ones(X.shape[0])
        for i, e in enumerate(mono):
            if e:
                col = col * X[:, i] ** e
        theta[:, j] = col
    return Library(theta, labels)


def finite_diff_derivatives(traj: Trajectory) -> np.ndarray:
    """Second-order central differences, one-sided second order at the ends."""
    if len(traj) < 3:
        raise ArgumentError("need at least 3 samples for finite differences")
    return np.gradient(traj.states, traj.dt, axis=0, edge_order=2)


@dataclass
class STLSQResult:
    coefficients: np.ndarray    # (features, components)
    iterations: int
    ridge_used: bool


def _solve(A, b, ridge_flag):
    if A.shape[1] == 0:
        return np.zeros(0)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        ridge_flag[0] = True
        AtA = A.T @ A
        return np.linalg.solve(AtA + 1e-10 * np.eye(AtA.shape[0]), A.T @ b)
    return np.linalg.lstsq(A, b, rcond=None)[0]


def stlsq(library: Library, targets, threshold: float = 0.02, max_iters: int = 20) -> STLSQResult:
    """Sequentially thresholded least squares, one regression per component.

    Each iteration solves least squares on the active columns and zeroes
    coefficients with magnitude below ``threshold``; stops at a fixed point.
    """
    if threshold < 0:
        raise ArgumentError("threshold must be >= 0")
    if max_iters < 1:
        raise ArgumentError("max_iters must be >= 1")
    theta = library.theta
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != theta.shape[0]:
        raise ArgumentError("targets and library have different sample counts")
    ridge = [False]
    xi = np.zeros((theta.shape[1], Y.shape[1]))
    iters = 0
    for c in range(Y.shape[1]):
        active = np.ones(theta.shape[1], dtype=bool)
        coef = np.zeros(theta.shape[1])
        for it in range(max_iters):
            coef = np.zeros(theta.shape[1])
            coef[active] = _solve(theta[:, active], Y[:, c], ridge)
            keep = np.abs(coef) >= threshold
            iters = max(iters, it + 1)
            if np.array_equal(keep & active, active):
                break
            active = keep & active
        coef[~active] = 0.0
        xi[:, c] = coef
    if ridge[0]:
        warnings.warn("rank-deficient active set; solved with ridge 1e-10", RuntimeWarning, stacklevel=2)
    return STLSQResult(xi, iters, ridge[0])


def coefficients_to_system(library: Library, coefficients) -> SymbolicSystem:
    n = len(library.labels[0])
    xi = np.asarray(coefficients)
    return SymbolicSystem([
        Polynomial(n, {mono: xi[j, c] for j, mono in enumerate(library.labels)})
        for c in range(xi.shape[1])
    ])


def sindy(traj: Trajectory, degree: int = 2, threshold: float = 0.02, max_iters: int = 20):
    """Finite differences + polynomial library + STLSQ on one trajectory."""
    lib = build_library(traj.states, degree)
    res = stlsq(lib, finite_diff_derivatives(traj), threshold, max_iters)
    return coefficients_to_system(lib, res.coefficients), res


# parameter counts --------------------------------------------------------

def _checked(v: int) -> int:
    if v > INT64_MAX:
        raise OverflowError(f"parameter count {v} exceeds int64 range")
    return v


def sindy_library_size(d: int, p: int) -> int:
    """Number of monomials of degree <= p in d variables: sum_k C(d+k-1, k)."""
    if d < 1 or p < 0:
        raise ArgumentError("need d >= 1 and p >= 0")
    return _checked(sum(math.comb(d + k - 1, k) for k in range(p + 1)))


def ac_param_count(d: int, p: int, m: int | None = None) -> int:
    """m terms, each a product of p affine forms over d inputs: m*p*(d+1).

    ``m`` defaults to d (interactions linear in the state dimension).
    """
    m = d if m is None else m
    if d < 1 or p < 1 or m < 1:
        raise ArgumentError("need d, p, m >= 1")
    return _checked(m * p * (d + 1))


def scaling_rows(p_values, d_values):
    """Rows ``(d, p, sindy_params, ac_params)``; overflowing entries are None."""
    rows = []
    for p in p_values:
        for d in d_values:
            try:
                s = sindy_library_size(d, p)
            except OverflowError:
                s = None
            try:
                a = ac_param_count(d, p)
            except OverflowError:
                a = None
            rows.append((d, p, s, a))
    return rows


def write_scaling_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "p", "sindy_params", "ac_params"])
        for d, p, s, a in rows:
            w.writerow([d, p, "overflow" if s is None else s, "overflow" if a is None else a])


def read_scaling_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        out = []
        for row in r:
            s = None if row["sindy_params"] == "overflow" else int(row["sindy_params"])
            a = None if row["ac_params"] == "overflow" else int(row["ac_params"])
            out.append((int(row["d"]), int(row["p"]), s, a))
    return out


def crossover(p: int, d_max: int = 1000):
    """Smallest d such that the AC count is below the SINDy count for every
    d' in [d, d_max]; None if there is no such d."""
    first = None
    for d in range(1, d_max + 1):
        if ac_param_count(d, p) < sindy_library_size(d, p):
            if first is None:
                first = d
        else:
            first = None
    return first
