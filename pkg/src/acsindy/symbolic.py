"""Symbolic expansion of circuits into sparse multivariate polynomials."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .circuit import PRODUCT, CircuitModel, norm_frozen
from .dynamics import BenchmarkSystem
from .errors import ArgumentError, StateError

DROP_TOL = 1e-3
MINUS = "−"
DOT = "·"
_SUPERSCRIPTS = str.maketrans("0123456789", "⁰¹²³⁴⁵⁶⁷⁸⁹")


def grlex_key(exponents):
    """Graded-lex sort key: total degree, then x before y before z."""
    return (sum(exponents), tuple(-e for e in exponents))


def monomials(nvars: int, max_degree: int):
    """All exponent tuples of total degree <= max_degree, graded-lex ordered."""
    out = []

    def rec(prefix, remaining, left):
        if left == 1:
            for e in range(remaining + 1):
                out.append(prefix + (e,))
            return
        for e in range(remaining + 1):
            rec(prefix + (e,), remaining - e, left - 1)

    rec((), max_degree, nvars)
    return sorted(out, key=grlex_key)


class Polynomial:
    """Sparse polynomial: exponent tuple -> nonzero coefficient."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms=None):
        self.nvars = nvars
        self.terms = {}
        for mono, c in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != nvars or any(e < 0 for e in mono):
                raise ArgumentError(f"bad exponent vector {mono} for {nvars} variables")
            if c != 0:
                self.terms[mono] = self.terms.get(mono, 0.0) + float(c)
        self.terms = {k: v for k, v in self.terms.items() if v != 0}

    @classmethod
    def constant(cls, nvars, c=1.0):
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars, i, c=1.0):
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): c})

    def __add__(self, other):
        out = dict(self.terms)
        for k, v in other.terms.items():
            s = out.get(k, 0.0) + v
            if s == 0:
                out.pop(k, None)
            else:
                out[k] = s
        p = Polynomial(self.nvars)
        p.terms = out
        return p

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, c: float):
        p = Polynomial(self.nvars)
        if c != 0:
            p.terms = {k: v * c for k, v in self.terms.items() if v * c != 0}
        return p

    def __mul__(self, other):
        out = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + v1 * v2
        p = Polynomial(self.nvars)
        p.terms = {k: v for k, v in out.items() if v != 0}
        return p

    def __eq__(self, other):
        return isinstance(other, Polynomial) and self.nvars == other.nvars and self.terms == other.terms

    def __repr__(self):
        return f"Polynomial({self.nvars}, {self.sorted_terms()})"

    @property
    def degree(self) -> int:
        return max((sum(k) for k in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def sorted_terms(self):
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    def coefficient(self, mono) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for mono, c in self.terms.items():
            out += c * np.prod(x ** np.array(mono), axis=1)
        return out

    def dropped(self, tol: float):
        p = Polynomial(self.nvars)
        p.terms = {k: v for k, v in self.terms.items() if abs(v) >= tol}
        return p

    def to_list(self):
        return [{"exponents": list(k), "coef": v} for k, v in self.sorted_terms()]

    @classmethod
    def from_list(cls, nvars, items):
        return cls(nvars, {tuple(it["exponents"]): it["coef"] for it in items})


@dataclass
class SymbolicSystem:
    """One polynomial per state derivative plus opaque ``c * sin(arg)`` terms."""

    polys: list
    sin_terms: list = field(default_factory=list)   # per component: [(coef, Polynomial arg)]

    def __post_init__(self):
        if not self.sin_terms:
            self.sin_terms = [[] for _ in self.polys]
        if len(self.sin_terms) != len(self.polys):
            raise ArgumentError("sin_terms must have one list per component")

    @property
    def dim(self) -> int:
        return len(self.polys)

    @property
    def nvars(self) -> int:
        return self.polys[0].nvars if self.polys else 0

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        for p, sins in zip(self.polys, self.sin_terms):
            v = p.evaluate(x)
            for c, arg in sins:
                v = v + c * np.sin(arg.evaluate(x))
            cols.append(v)
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {
            "nvars": self.nvars,
            "components": [
                {
                    "terms": p.to_list(),
                    "sin_terms": [{"coef": c, "argument": a.to_list()} for c, a in sins],
                }
                for p, sins in zip(self.polys, self.sin_terms)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicSystem":
        n = int(d["nvars"])
        polys, sins = [], []
        for comp in d["components"]:
            polys.append(Polynomial.from_list(n, comp["terms"]))
            sins.append([(float(s["coef"]), Polynomial.from_list(n, s["argument"]))
                         for s in comp.get("sin_terms", [])])
        return cls(polys, sins)


# expansion ---------------------------------------------------------------

class _Feature:
    """Polynomial part plus a linear combination of opaque sin atoms."""

    __slots__ = ("poly", "sins")

    def __init__(self, poly, sins=None):
        self.poly = poly
        self.sins = sins or {}   # key -> (coef, arg Polynomial)

    def scale(self, c):
        return _Feature(self.poly.scale(c), {k: (v * c, a) for k, (v, a) in self.sins.items() if v * c != 0})

    def add(self, other):
        sins = dict(self.sins)
        for k, (v, a) in other.sins.items():
            if k in sins:
                s = sins[k][0] + v
                if s == 0:
                    del sins[k]
                else:
                    sins[k] = (s, a)
            else:
                sins[k] = (v, a)
        return _Feature(self.poly + other.poly, sins)


def _sin_key(arg: Polynomial):
    return tuple(arg.sorted_terms())


def _linear(weights, mask, inputs, nvars, divisor):
    eff = weights * mask
    out = []
    const = Polynomial.constant(nvars)
    for j in range(eff.shape[0]):
        acc = _Feature(Polynomial(nvars))
        for i, feat in enumerate(inputs):
            w = eff[j, i]
            if w != 0:
                acc = acc.add(feat.scale(w))
        if eff[j, -1] != 0:
            acc = acc.add(_Feature(const.scale(eff[j, -1])))
        out.append(acc.scale(1.0 / divisor[j]) if divisor[j] != 1.0 else acc)
    return out


def expand(model: CircuitModel, norm: str = "frozen", drop_tol: float = 0.0) -> SymbolicSystem:
    """Propagate polynomials through the circuit.

    With ``norm="frozen"`` the normalization divisors are folded into the
    coefficients (the model's statistics must be frozen); ``"off"`` expands
    the raw circuit. Sin groups become opaque terms and may only feed the
    head. Coefficients with magnitude below ``drop_tol`` are discarded.
    """
    if norm not in ("frozen", "off"):
        raise ArgumentError(f"norm must be 'frozen' or 'off', got {norm!r}")
    if norm == "frozen" and not norm_frozen(model):
        raise StateError("normalization statistics are not frozen; call freeze_norm first")
    n = model.input_dim
    feats = [_Feature(Polynomial.variable(n, i)) for i in range(n)]
    raw = feats
    for li, layer in enumerate(model.layers):
        div = layer.norm.divisor() if norm == "frozen" else np.ones(layer.spec.linear_out_dim)
        h = _linear(layer.weights, layer.mask, feats, n, div)
        nxt = []
        for kind, idx in layer.spec.groups():
            if kind == PRODUCT:
                if any(h[j].sins for j in idx):
                    raise ArgumentError(f"layer {li}: product of a sin feature cannot be expanded")
                p = Polynomial.constant(n)
                for j in idx:
                    p = p * h[j].poly
                nxt.append(_Feature(p))
            else:
                arg = h[idx[0]]
                if arg.sins:
                    raise ArgumentError(f"layer {li}: nested sin cannot be expanded")
                if arg.poly.is_zero():
                    nxt.append(_Feature(Polynomial(n)))
                else:
                    nxt.append(_Feature(Polynomial(n), {_sin_key(arg.poly): (1.0, arg.poly)}))
        if li + 1 < len(model.layers) and any(f.sins for f in nxt):
            raise ArgumentError(f"layer {li}: sin output feeding a later layer cannot be expanded")
        feats = nxt
    head_in = feats + raw if (model.skip and model.layers) else feats
    div = model.head_norm.divisor() if norm == "frozen" else np.ones(len(head_in))
    # Head normalization divides inputs; fold it into the weight columns.
    w = model.head_weights.copy()
    w[:, :-1] = w[:, :-1] / div
    outs = _linear(w, model.head_mask, head_in, n, np.ones(model.output_dim))
    polys, sins = [], []
    for f in outs:
        polys.append(f.poly.dropped(drop_tol) if drop_tol > 0 else f.poly)
        sins.append([(c, a) for c, a in sorted(f.sins.values(), key=lambda t: _sin_key(t[1]))
                     if abs(c) >= drop_tol and c != 0])
    return SymbolicSystem(polys, sins)


# rendering ---------------------------------------------------------------

def variable_names(nvars: int):
    if nvars <= 3:
        return ["x", "y", "z"][:nvars]
    return [f"x{i + 1}" for i in range(nvars)]


def monomial_str(mono, names) -> str:
    parts = []
    for e, name in zip(mono, names):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(name + str(e).translate(_SUPERSCRIPTS))
    return DOT.join(parts)


def _fmt_coef(c: float, precision: int) -> str:
    return f"{abs(c):.{precision}f}"


def _term_str(c, body, precision, first):
    mag = _fmt_coef(c, precision)
    text = f"{mag}{DOT}{body}" if body else mag
    if first:
        return (MINUS if c < 0 else "") + text
    return (f" {MINUS} " if c < 0 else " + ") + text


def _poly_inline(p: Polynomial, names, precision) -> str:
    out = ""
    for i, (mono, c) in enumerate(p.sorted_terms()):
        out += _term_str(c, monomial_str(mono, names), precision, i == 0)
    return out or "0"


def render(system: SymbolicSystem, precision: int = 3, drop_tol: float = DROP_TOL) -> str:
    """One ``d<var>/dt = ...`` line per component, graded-lex term order."""
    names = variable_names(system.nvars)
    lines, suppressed = [], 0
    for name, p, sins in zip(names, system.polys, system.sin_terms):
        parts = []
        for mono, c in p.sorted_terms():
            if abs(c) < drop_tol:
                suppressed += 1
                continue
            parts.append(_term_str(c, monomial_str(mono, names), precision, not parts))
        for c, arg in sins:
            if abs(c) < drop_tol:
                suppressed += 1
                continue
            body = f"sin({_poly_inline(arg.dropped(drop_tol), names, precision)})"
            parts.append(_term_str(c, body, precision, not parts))
        lines.append(f"d{name}/dt = " + ("".join(parts) if parts else "0"))
    if suppressed:
        lines.append(f"({suppressed} term{'s' if suppressed != 1 else ''} with |coef| < {drop_tol:g} suppressed)")
    return "\n".join(lines)


# ground truth and comparison ---------------------------------------------

def ground_truth(system: BenchmarkSystem) -> SymbolicSystem:
    n = system.dim

    def P(terms):
        return Polynomial(n, terms)

    if system.name == "nonlinear2d":
        return SymbolicSystem([
            P({(1, 0): -0.1, (0, 1): 1.0}),
            P({(1, 0): -2.0, (0, 1): -0.1, (1, 1): -0.5, (0, 2): -0.025}),
        ])
    s, r, b = system.params
    polys = [
        P({(1, 0, 0): -s, (0, 1, 0): s}),
        P({(1, 0, 0): r, (0, 1, 0): -1.0, (1, 0, 1): -1.0}),
        P({(1, 1, 0): 1.0, (0, 0, 1): -b}),
    ]
    sins = [[], [], []]
    if system.name == "lorenz_forced":
        sins[0] = [(0.1, P({(1, 0, 0): 1.0}))]
    return SymbolicSystem(polys, sins)


@dataclass
class RecoveryReport:
    components: list          # per component dict with matched / missing / spurious
    max_abs_error: float
    n_missing: int
    n_spurious: int
    max_spurious: float

    def to_dict(self) -> dict:
        return {
            "components": self.components,
            "max_abs_error": self.max_abs_error,
            "n_missing": self.n_missing,
            "n_spurious": self.n_spurious,
            "max_spurious": self.max_spurious,
        }


def compare(recovered: SymbolicSystem, truth: SymbolicSystem) -> RecoveryReport:
    """Score a recovered system term-by-term against ground truth (raw maps)."""
    if recovered.dim != truth.dim or recovered.nvars != truth.nvars:
        raise ArgumentError(
            f"dimension mismatch: recovered {recovered.dim}x{recovered.nvars}, truth {truth.dim}x{truth.nvars}"
        )
    names = variable_names(truth.nvars)
    comps = []
    max_err, n_miss, n_spur, max_spur = 0.0, 0, 0, 0.0
    for rp, tp in zip(recovered.polys, truth.polys):
        matched, missing, spurious = [], [], []
        for mono in sorted(set(rp.terms) | set(tp.terms), key=grlex_key):
            label = monomial_str(mono, names) or "1"
            if mono in tp.terms and mono in rp.terms:
                err = abs(rp.terms[mono] - tp.terms[mono])
                matched.append({"term": label, "exponents": list(mono), "true": tp.terms[mono],
                                "recovered": rp.terms[mono], "abs_error": err})
                max_err = max(max_err, err)
            elif mono in tp.terms:
                missing.append({"term": label, "exponents": list(mono), "true": tp.terms[mono]})
            else:
                spurious.append({"term": label, "exponents": list(mono), "recovered": rp.terms[mono]})
                max_spur = max(max_spur, abs(rp.terms[mono]))
        n_miss += len(missing)
        n_spur += len(spurious)
        comps.append({"matched": matched, "missing": missing, "spurious": spurious})
    return RecoveryReport(comps, max_err, n_miss, n_spur, max_spur)
