"""Arithmetic-circuit dynamics model.

A model is a stack of layers, each computing

    h = (W * M) @ [x; 1]          masked linear map (sum nodes)
    h~ = h / (sigma + eps)         feature normalization (optional)
    x'_k = prod_{j in G_k} h~_j    product groups (or sin of one feature)

followed by a masked linear head over the (normalized) last-layer outputs,
optionally concatenated with the raw input (skip connection), plus a
constant. Forward and reverse passes are written out by hand over batches.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ArgumentError, NumericError

PRODUCT = "product"
SIN = "sin"

NORM_OFF = "off"
NORM_FROZEN = "frozen"
NORM_ACCUMULATE = "accumulate"
_NORM_MODES = (NORM_OFF, NORM_FROZEN, NORM_ACCUMULATE)

EPS = 1e-8
# Below this, a feature is treated as constant and left unscaled.
SIGMA_FLOOR = 1e-6

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one linear + interaction layer.

    ``primitives`` lists the kind of each interaction group in order; ``None``
    means every group is a product of ``group_size`` consecutive features.
    Sin groups consume a single feature.
    """

    in_dim: int
    linear_out_dim: int
    group_size: int = 2
    primitives: tuple | None = None

    def __post_init__(self):
        if self.in_dim < 1 or self.linear_out_dim < 1 or self.group_size < 1:
            raise ArgumentError(f"layer dimensions must be positive: {self}")
        if self.primitives is None:
            if self.linear_out_dim % self.group_size:
                raise ArgumentError(
                    f"linear_out_dim {self.linear_out_dim} not divisible by group_size {self.group_size}"
                )
        else:
            prims = tuple(str(p).lower() for p in self.primitives)
            object.__setattr__(self, "primitives", prims)
            bad = [p for p in prims if p not in (PRODUCT, SIN)]
            if bad:
                raise ArgumentError(f"unknown primitive(s) {bad}")
            used = sum(self.group_size if p == PRODUCT else 1 for p in prims)
            if used != self.linear_out_dim:
                raise ArgumentError(
                    f"groups consume {used} features but linear_out_dim is {self.linear_out_dim}"
                )

    @cached_property
    def group_kinds(self) -> tuple:
        if self.primitives is None:
            return (PRODUCT,) * (self.linear_out_dim // self.group_size)
        return self.primitives

    @property
    def out_dim(self) -> int:
        return len(self.group_kinds)

    @cached_property
    def _layout(self):
        prod_idx, prod_pos, sin_idx, sin_pos = [], [], [], []
        j = 0
        for k, kind in enumerate(self.group_kinds):
            if kind == PRODUCT:
                prod_idx.append(list(range(j, j + self.group_size)))
                prod_pos.append(k)
                j += self.group_size
            else:
                sin_idx.append(j)
                sin_pos.append(k)
                j += 1
        return (
            np.array(prod_idx, dtype=int).reshape(-1, self.group_size),
            np.array(prod_pos, dtype=int),
            np.array(sin_idx, dtype=int),
            np.array(sin_pos, dtype=int),
        )

    def groups(self):
        """List of (kind, feature indices) in output order."""
        prod_idx, prod_pos, sin_idx, sin_pos = self._layout
        out = [None] * self.out_dim
        for idx, pos in zip(prod_idx, prod_pos):
            out[pos] = (PRODUCT, tuple(int(i) for i in idx))
        for idx, pos in zip(sin_idx, sin_pos):
            out[pos] = (SIN, (int(idx),))
        return out

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "linear_out_dim": self.linear_out_dim,
            "group_size": self.group_size,
            "primitives": None if self.primitives is None else list(self.primitives),
        }

    @classmethod
    def from_dict(cls, d):
        prims = d.get("primitives")
        return cls(int(d["in_dim"]), int(d["linear_out_dim"]), int(d.get("group_size", 2)),
                   None if prims is None else tuple(prims))


@dataclass
class FeatureNormState:
    """Running per-feature standard deviation (Welford / Chan merge)."""

    sigma: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    count: int = 0
    epsilon: float = EPS
    frozen: bool = False

    @classmethod
    def fresh(cls, n: int, epsilon: float = EPS):
        return cls(np.ones(n), np.zeros(n), np.zeros(n), 0, epsilon, False)

    def reset(self):
        n = self.sigma.shape[0]
        self.sigma = np.ones(n)
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)
        self.count = 0
        self.frozen = False

    def update(self, batch: np.ndarray):
        if self.frozen:
            return
        b = batch.shape[0]
        if b == 0:
            return
        bmean = batch.mean(axis=0)
        bm2 = ((batch - bmean) ** 2).sum(axis=0)
        n = self.count + b
        delta = bmean - self.mean
        self.mean = self.mean + delta * (b / n)
        self.m2 = self.m2 + bm2 + delta**2 * (self.count * b / n)
        self.count = n
        self.sigma = np.sqrt(self.m2 / n)

    def divisor(self) -> np.ndarray:
        return np.where(self.sigma < SIGMA_FLOOR, 1.0, self.sigma + self.epsilon)

    def to_dict(self):
        return {
            "sigma": self.sigma.tolist(),
            "mean": self.mean.tolist(),
            "m2": self.m2.tolist(),
            "count": int(self.count),
            "epsilon": float(self.epsilon),
            "frozen": bool(self.frozen),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["sigma"], dtype=float), np.array(d["mean"], dtype=float),
                   np.array(d["m2"], dtype=float), int(d["count"]), float(d["epsilon"]),
                   bool(d["frozen"]))


@dataclass
class Layer:
    spec: LayerSpec
    weights: np.ndarray
    mask: np.ndarray
    norm: FeatureNormState


@dataclass
class CircuitModel:
    layers: list
    head_weights: np.ndarray
    head_mask: np.ndarray
    head_norm: FeatureNormState
    skip: bool = False
    seed: int | None = None

    @property
    def input_dim(self) -> int:
        if self.layers:
            return self.layers[0].spec.in_dim
        return self.head_weights.shape[1] - 1

    @property
    def output_dim(self) -> int:
        return self.head_weights.shape[0]

    @property
    def head_in_dim(self) -> int:
        return self.head_weights.shape[1] - 1

    def params(self) -> list:
        """Weight arrays in canonical order: hidden layers, then head."""
        return [layer.weights for layer in self.layers] + [self.head_weights]

    def masks(self) -> list:
        return [layer.mask for layer in self.layers] + [self.head_mask]

    def norms(self) -> list:
        return [layer.norm for layer in self.layers] + [self.head_norm]

    def set_params(self, arrays):
        for layer, w in zip(self.layers, arrays[:-1]):
            layer.weights = w
        self.head_weights = arrays[-1]

    def copy(self) -> "CircuitModel":
        return copy.deepcopy(self)

    def signature(self) -> tuple:
        return tuple(p.shape for p in self.params()) + (self.skip,)


@dataclass
class ForwardTrace:
    signature: tuple
    inputs: list = field(default_factory=list)      # augmented layer inputs [x; 1]
    pre: list = field(default_factory=list)         # h
    divisors: list = field(default_factory=list)
    normed: list = field(default_factory=list)      # h~
    outputs: list = field(default_factory=list)     # interaction outputs
    head_pre: np.ndarray | None = None              # z
    head_divisor: np.ndarray | None = None
    head_input: np.ndarray | None = None            # [z~; 1]
    output: np.ndarray | None = None


@dataclass
class ParamGrads:
    """Gradients aligned with ``CircuitModel.params()``."""

    arrays: list

    @classmethod
    def zeros_like(cls, model: CircuitModel):
        return cls([np.zeros_like(p) for p in model.params()])

    def __iadd__(self, other):
        for a, b in zip(self.arrays, other.arrays):
            a += b
        return self

    def scale(self, c: float):
        return ParamGrads([a * c for a in self.arrays])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    @property
    def layers(self):
        return self.arrays[:-1]

    @property
    def head(self):
        return self.arrays[-1]


# construction ------------------------------------------------------------

def _check_chain(specs, output_dim):
    for a, b in zip(specs[:-1], specs[1:]):
        if a.out_dim != b.in_dim:
            raise ArgumentError(
                f"layer output {a.out_dim} does not match next layer input {b.in_dim}"
            )
    if output_dim < 1:
        raise ArgumentError("output_dim must be positive")


def _head_in_dim(specs, skip, input_dim=None):
    last = specs[-1].out_dim if specs else 0
    n0 = specs[0].in_dim if specs else input_dim
    return last + (n0 if skip or not specs else 0)


def init_model(specs, output_dim: int, seed: int = 0, skip: bool = False) -> CircuitModel:
    """Random model with weights ~ N(0, 1/(fan_in + 1)) and all masks on."""
    specs = list(specs)
    if not specs:
        raise ArgumentError("at least one layer spec is required")
    _check_chain(specs, output_dim)
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        w = rng.normal(0.0, 1.0 / np.sqrt(spec.in_dim + 1), size=(spec.linear_out_dim, spec.in_dim + 1))
        layers.append(Layer(spec, w, np.ones_like(w), FeatureNormState.fresh(spec.linear_out_dim)))
    p = _head_in_dim(specs, skip)
    hw = rng.normal(0.0, 1.0 / np.sqrt(p + 1), size=(output_dim, p + 1))
    return CircuitModel(layers, hw, np.ones_like(hw), FeatureNormState.fresh(p), skip, seed)


def build_model(layers, head, skip: bool = False) -> CircuitModel:
    """Model from explicit weights.

    ``layers`` is a list of ``(spec, weights)``; ``head`` the head weight
    matrix (last column is the constant).
    """
    built = []
    for spec, w in layers:
        w = np.array(w, dtype=float)
        if w.shape != (spec.linear_out_dim, spec.in_dim + 1):
            raise ArgumentError(f"weights shape {w.shape} does not match {spec}")
        built.append(Layer(spec, w, np.ones_like(w), FeatureNormState.fresh(spec.linear_out_dim)))
    _check_chain([l.spec for l in built], 1)
    hw = np.atleast_2d(np.array(head, dtype=float))
    p = _head_in_dim([l.spec for l in built], skip)
    if hw.shape[1] != p + 1:
        raise ArgumentError(f"head has {hw.shape[1]} columns, expected {p + 1}")
    return CircuitModel(built, hw, np.ones_like(hw), FeatureNormState.fresh(p), skip, None)


def default_architecture(state_dim: int, terms_per_dim: int = 4, group_size: int = 2,
                         depth: int = 1, sin_terms: int = 0):
    """Layer specs used by the experiments: ``terms_per_dim * d`` product terms."""
    m = terms_per_dim * state_dim
    specs = []
    n_in = state_dim
    for i in range(depth):
        prims = None
        n_lin = group_size * m
        if i == 0 and sin_terms:
            prims = (PRODUCT,) * m + (SIN,) * sin_terms
            n_lin += sin_terms
        spec = LayerSpec(n_in, n_lin, group_size, prims)
        specs.append(spec)
        n_in = spec.out_dim
    return specs


# normalization -----------------------------------------------------------

def _norm_mode(norm) -> str:
    mode = str(norm).lower()
    if mode not in _NORM_MODES:
        raise ArgumentError(f"norm must be one of {_NORM_MODES}, got {norm!r}")
    return mode


def _divisor(state: FeatureNormState, feats: np.ndarray, mode: str) -> np.ndarray:
    if mode == NORM_OFF:
        return np.ones(feats.shape[1])
    if mode == NORM_ACCUMULATE:
        state.update(feats)
    return state.divisor()


def freeze_norm(model: CircuitModel) -> CircuitModel:
    for st in model.norms():
        st.frozen = True
    return model


def reset_norm(model: CircuitModel) -> CircuitModel:
    for st in model.norms():
        st.reset()
    return model


def norm_frozen(model: CircuitModel) -> bool:
    return all(st.frozen for st in model.norms())


def accumulate_norm(model: CircuitModel, states) -> CircuitModel:
    """Reset, accumulate statistics over ``states`` in one pass and freeze.

    A single batch makes every layer's sigma the exact population std of its
    features given the already-updated statistics of the layers below.
    """
    reset_norm(model)
    forward(model, np.atleast_2d(np.asarray(states, dtype=float)), NORM_ACCUMULATE)
    return freeze_norm(model)


# forward / backward ------------------------------------------------------

def _interact(spec: LayerSpec, hn: np.ndarray) -> np.ndarray:
    prod_idx, prod_pos, sin_idx, sin_pos = spec._layout
    if spec.primitives is None:
        b = hn.shape[0]
        return hn.reshape(b, -1, spec.group_size).prod(axis=2)
    out = np.empty((hn.shape[0], spec.out_dim))
    if prod_pos.size:
        out[:, prod_pos] = hn[:, prod_idx].prod(axis=2)
    if sin_pos.size:
        out[:, sin_pos] = np.sin(hn[:, sin_idx])
    return out


def _interact_backward(spec: LayerSpec, hn: np.ndarray, dout: np.ndarray) -> np.ndarray:
    g = spec.group_size
    if spec.primitives is None:
        b = hn.shape[0]
        if g == 1:
            return dout.copy()
        block = hn.reshape(b, -1, g)
        if g == 2:
            return (dout[:, :, None] * block[:, :, ::-1]).reshape(b, -1)
        out = np.empty_like(block)
        for j in range(g):
            out[:, :, j] = dout * np.prod(np.delete(block, j, axis=2), axis=2)
        return out.reshape(b, -1)
    prod_idx, prod_pos, sin_idx, sin_pos = spec._layout
    dhn = np.empty_like(hn)
    if prod_pos.size:
        block = hn[:, prod_idx]                          # (B, G, g)
        d = dout[:, prod_pos]                            # (B, G)
        for j in range(g):
            others = np.prod(np.delete(block, j, axis=2), axis=2) if g > 1 else 1.0
            dhn[:, prod_idx[:, j]] = d * others
    if sin_pos.size:
        dhn[:, sin_idx] = dout[:, sin_pos] * np.cos(hn[:, sin_idx])
    return dhn


def forward(model: CircuitModel, x, norm=NORM_OFF):
    """Evaluate the circuit on a state (n,) or batch (B, n).

    Returns ``(output, trace)``; output has shape (out,) or (B, out).
    In ``accumulate`` mode, running statistics are updated with this batch
    first and the updated sigma is used in the same pass.
    """
    mode = _norm_mode(norm)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x.reshape(1, -1) if single else x
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ArgumentError(f"input shape {x.shape} does not match model input dim {model.input_dim}")
    b = a.shape[0]
    ones = np.ones((b, 1))
    trace = ForwardTrace(model.signature())
    a0 = a
    for i, layer in enumerate(model.layers):
        aug = np.concatenate([a, ones], axis=1)
        h = aug @ (layer.weights * layer.mask).T
        div = _divisor(layer.norm, h, mode)
        hn = h / div
        a = _interact(layer.spec, hn)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in layer {i}")
        trace.inputs.append(aug)
        trace.pre.append(h)
        trace.divisors.append(div)
        trace.normed.append(hn)
        trace.outputs.append(a)
    z = np.concatenate([a, a0], axis=1) if (model.skip and model.layers) else a
    div = _divisor(model.head_norm, z, mode)
    aug = np.concatenate([z / div, ones], axis=1)
    y = aug @ (model.head_weights * model.head_mask).T
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite values in head")
    trace.head_pre = z
    trace.head_divisor = div
    trace.head_input = aug
    trace.output = y
    return (y[0] if single else y), trace


def vjp(model: CircuitModel, trace: ForwardTrace, output_grad):
    """Vector-Jacobian product of the batch output.

    Returns ``(ParamGrads, input_grad)``: gradients of
    ``sum(output_grad * output)`` w.r.t. every weight (summed over the batch,
    zero at masked entries) and w.r.t. the input. Sigma is a constant.
    """
    if trace.signature != model.signature():
        raise ArgumentError("trace was not produced by this model")
    dy = np.asarray(output_grad, dtype=float)
    if dy.ndim == 1:
        dy = dy.reshape(1, -1)
    if dy.shape != trace.output.shape:
        raise ArgumentError(f"output_grad shape {dy.shape} != output shape {trace.output.shape}")
    grads = [None] * (len(model.layers) + 1)
    grads[-1] = (dy.T @ trace.head_input) * model.head_mask
    dz = (dy @ (model.head_weights * model.head_mask))[:, :-1] / trace.head_divisor
    n_last = model.layers[-1].spec.out_dim if model.layers else 0
    if model.skip and model.layers:
        da, dx0 = dz[:, :n_last], dz[:, n_last:]
    else:
        da, dx0 = dz, None
    if not model.layers:
        return ParamGrads(grads), dz
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dhn = _interact_backward(layer.spec, trace.normed[i], da)
        dh = dhn / trace.divisors[i]
        grads[i] = (dh.T @ trace.inputs[i]) * layer.mask
        da = (dh @ (layer.weights * layer.mask))[:, :-1]
    if dx0 is not None:
        da = da + dx0
    return ParamGrads(grads), da


def backward(model: CircuitModel, trace: ForwardTrace, output_grad) -> ParamGrads:
    return vjp(model, trace, output_grad)[0]


def predict(model: CircuitModel, x, norm=NORM_FROZEN) -> np.ndarray:
    return forward(model, x, norm)[0]


# bookkeeping -------------------------------------------------------------

def count_active_params(model: CircuitModel) -> int:
    return int(sum(int(m.sum()) for m in model.masks()))


def count_total_params(model: CircuitModel) -> int:
    return int(sum(m.size for m in model.masks()))


def renormalize(model: CircuitModel, states, norm_sin: bool = False) -> CircuitModel:
    """Re-estimate sigma on ``states`` without changing the represented function.

    Each layer's new statistics rescale its normalized features; the
    consuming weight columns are divided by the same factors so the frozen
    forward pass is unchanged. Sin features keep their old statistics
    (a sin cannot absorb a rescale) unless ``norm_sin`` is set.
    """
    a = np.atleast_2d(np.asarray(states, dtype=float))
    a0 = a
    ones = np.ones((a.shape[0], 1))
    for i, layer in enumerate(model.layers):
        aug = np.concatenate([a, ones], axis=1)
        h = aug @ (layer.weights * layer.mask).T
        old = layer.norm.divisor()
        keep = layer.norm
        fresh = FeatureNormState.fresh(h.shape[1], keep.epsilon)
        fresh.update(h)
        prod_idx, prod_pos, sin_idx, sin_pos = layer.spec._layout
        if sin_idx.size and not norm_sin:
            for arr in ("sigma", "mean", "m2"):
                getattr(fresh, arr)[sin_idx] = getattr(keep, arr)[sin_idx]
        fresh.frozen = True
        layer.norm = fresh
        new = fresh.divisor()
        ratio = old / new
        q = np.ones(layer.spec.out_dim)
        if prod_pos.size:
            q[prod_pos] = ratio[prod_idx].prod(axis=1)
        if sin_pos.size:
            q[sin_pos] = 1.0
        if i + 1 < len(model.layers):
            model.layers[i + 1].weights[:, :-1] /= q
        else:
            model.head_weights[:, : layer.spec.out_dim] /= q
        a = _interact(layer.spec, h / new)
    z = np.concatenate([a, a0], axis=1) if (model.skip and model.layers) else a
    old = model.head_norm.divisor()
    fresh = FeatureNormState.fresh(z.shape[1], model.head_norm.epsilon)
    fresh.update(z)
    fresh.frozen = True
    model.head_norm = fresh
    model.head_weights[:, :-1] *= fresh.divisor() / old
    return model


def fit_low_rank_quadratic(Q, rank: int) -> CircuitModel:
    """One-layer circuit computing the rank-``rank`` truncation of x^T Q x.

    Keeps the eigenpairs of largest |eigenvalue|; each becomes a product
    ``(a_k . x)(b_k . x)`` with ``a_k = sqrt|l| v``, ``b_k = sign(l) sqrt|l| v``.
    """
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    if Q.shape != (d, d) or not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ArgumentError("Q must be a symmetric square matrix")
    if not 1 <= rank <= d:
        raise ArgumentError(f"rank must be in [1, {d}], got {rank}")
    try:
        vals, vecs = np.linalg.eigh(Q)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(-np.abs(vals), kind="stable")[:rank]
    rows = []
    for k in order:
        s = np.sqrt(abs(vals[k]))
        v = vecs[:, k] * s
        rows.append(np.append(v, 0.0))
        rows.append(np.append(np.sign(vals[k]) * v if vals[k] != 0 else v * 0.0, 0.0))
    spec = LayerSpec(d, 2 * rank, 2)
    head = np.append(np.ones(rank), 0.0).reshape(1, -1)
    return build_model([(spec, np.array(rows))], head)


# checkpoints -------------------------------------------------------------

def model_to_dict(model: CircuitModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": model.seed,
        "skip": bool(model.skip),
        "layers": [
            {
                "spec": layer.spec.to_dict(),
                "weights": layer.weights.tolist(),
                "mask": layer.mask.astype(int).tolist(),
                "norm": layer.norm.to_dict(),
            }
            for layer in model.layers
        ],
        "head": {
            "weights": model.head_weights.tolist(),
            "mask": model.head_mask.astype(int).tolist(),
            "norm": model.head_norm.to_dict(),
        },
    }


def model_from_dict(d: dict) -> CircuitModel:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ArgumentError(f"unsupported checkpoint format_version {version!r}")
    layers = []
    for ld in d["layers"]:
        w = np.array(ld["weights"], dtype=float)
        layers.append(Layer(LayerSpec.from_dict(ld["spec"]), w,
                            np.array(ld["mask"], dtype=float).reshape(w.shape),
                            FeatureNormState.from_dict(ld["norm"])))
    hd = d["head"]
    hw = np.atleast_2d(np.array(hd["weights"], dtype=float))
    model = CircuitModel(layers, hw, np.array(hd["mask"], dtype=float).reshape(hw.shape),
                         FeatureNormState.from_dict(hd["norm"]), bool(d.get("skip", False)),
                         d.get("seed"))
    _check_chain([l.spec for l in layers], model.output_dim)
    return model


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_model(model: CircuitModel, path, extra: dict | None = None) -> None:
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        fh.write(dumps(payload))


def load_model(path) -> tuple:
    """Returns ``(model, payload)``; payload carries any extra keys."""
    with open(path) as fh:
        payload = json.load(fh)
    return model_from_dict(payload), payload
