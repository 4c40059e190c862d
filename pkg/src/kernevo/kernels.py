"""Covariance evaluation for expression trees and the classic reference kernels.

Both kinds of kernel are evaluated over a :class:`PairFeatures` object, which
caches the hyperparameter-free parts of a covariance build (pairwise
Euclidean distances, centred inputs) so that repeated evaluations during
hyperparameter search only redo the cheap elementwise work.

White noise ``delta(x, x')`` is index identity: it is the identity matrix for
a build of ``K(X, X)``, zero for a cross build ``K(X, X*)`` and one for the
diagonal-only build used by predictive variances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from . import grammar
from .grammar import Node

DEFAULT_BOUNDS = (1e-3, 1e3)


class EvaluationFault(ArithmeticError):
    """A kernel produced non-finite covariances for the given hyperparameters."""


class DimensionMismatch(ValueError):
    pass


def _check_pair(x, xp):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape:
        raise DimensionMismatch(f"inputs have shapes {x.shape} and {xp.shape}")
    return x, xp


def scaled_distance(x, xp, lengthscale: float) -> float:
    """Euclidean distance divided by the lengthscale."""
    x, xp = _check_pair(x, xp)
    return float(np.linalg.norm(x - xp) / lengthscale)


def shifted_dot(x, xp, lengthscale: float, shift: float) -> float:
    """Inner product of the shifted inputs, divided by the lengthscale."""
    x, xp = _check_pair(x, xp)
    return float(np.dot(x - shift, xp - shift) / lengthscale)


class PairFeatures:
    """Hyperparameter-independent data for one covariance build.

    Parameters
    ----------
    X1, X2 : array_like
        Row-wise inputs.  ``X2=None`` requests the symmetric build ``K(X1, X1)``.
    diag : bool
        Only the diagonal ``k(x_i, x_i)`` of ``K(X1, X1)`` is wanted.
    """

    def __init__(self, X1, X2=None, diag: bool = False):
        self.same = X2 is None or X2 is X1 or diag
        self.X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        self.diag = diag
        self.X2 = self.X1 if self.same else np.atleast_2d(np.asarray(X2, dtype=float))
        if self.X1.shape[1] != self.X2.shape[1]:
            raise DimensionMismatch(
                f"input dimensions differ: {self.X1.shape[1]} vs {self.X2.shape[1]}"
            )
        if diag:
            self.shape = (self.X1.shape[0],)
        else:
            self.shape = (self.X1.shape[0], self.X2.shape[0])
        self._dist = None
        self._absdiff = None

    @property
    def dim(self) -> int:
        return self.X1.shape[1]

    @property
    def dist(self) -> np.ndarray:
        if self._dist is None:
            if self.diag:
                self._dist = np.zeros(self.shape)
            else:
                self._dist = cdist(self.X1, self.X2)
                if self.same:
                    np.fill_diagonal(self._dist, 0.0)
        return self._dist

    def r(self, lengthscale: float) -> np.ndarray:
        return self.dist / lengthscale

    def sin2_sum(self, lengthscale: float) -> np.ndarray:
        """``sum_d sin^2(pi |x_d - x'_d| / lengthscale)`` over input dimensions."""
        if self.diag:
            return np.zeros(self.shape)
        if self._absdiff is None:
            self._absdiff = np.abs(self.X1[:, None, :] - self.X2[None, :, :])
        return np.sum(np.sin(np.pi * self._absdiff / lengthscale) ** 2, axis=-1)

    def s(self, lengthscale: float, shift: float) -> np.ndarray:
        a = self.X1 - shift
        if self.diag:
            return np.einsum("ij,ij->i", a, a) / lengthscale
        b = a if self.same else self.X2 - shift
        return (a @ b.T) / lengthscale

    def delta(self) -> np.ndarray:
        if self.diag:
            return np.ones(self.shape)
        if self.same:
            return np.eye(self.shape[0])
        return np.zeros(self.shape)


# ----------------------------------------------------------------------------
# reference kernels

def _se(t, f):
    return t[0] ** 2 * np.exp(-0.5 * f.r(t[1]) ** 2)


def _m32(t, f):
    a = np.sqrt(3.0) * f.r(t[1])
    return t[0] ** 2 * (1.0 + a) * np.exp(-a)


def _m52(t, f):
    r = f.r(t[1])
    a = np.sqrt(5.0) * r
    return t[0] ** 2 * (1.0 + a + 5.0 / 3.0 * r**2) * np.exp(-a)


def _rq(t, f):
    return t[0] ** 2 * (1.0 + f.r(t[1]) ** 2 / (2.0 * t[2])) ** (-t[2])


def _exp(t, f):
    return t[0] ** 2 * np.exp(-f.r(t[1]))


def _gexp(t, f):
    return t[0] ** 2 * np.exp(-f.r(t[1]) ** t[2])


def _per(t, f):
    # sin^2 summed per input dimension: equal to sin^2(pi r) in 1-D, and unlike
    # sin^2 of the Euclidean distance it stays positive semi-definite for d > 1
    return t[0] ** 2 * np.exp(-2.0 * f.sin2_sum(t[1]) / t[2] ** 2)


def _lin(t, f):
    return f.s(t[0], t[1])


def _con(t, f):
    return np.full(f.shape, float(t[0]))


def _wn(t, f):
    return t[0] * f.delta()


@dataclass(frozen=True)
class BaselineSpec:
    params: tuple[str, ...]
    fn: Callable
    bounds: tuple[tuple[float, float], ...] = ()

    def param_bounds(self) -> np.ndarray:
        b = list(self.bounds) + [DEFAULT_BOUNDS] * (len(self.params) - len(self.bounds))
        return np.array(b, dtype=float)


BASELINES: dict[str, BaselineSpec] = {
    "SE": BaselineSpec(("amplitude", "lengthscale"), _se),
    "M32": BaselineSpec(("amplitude", "lengthscale"), _m32),
    "M52": BaselineSpec(("amplitude", "lengthscale"), _m52),
    "RQ": BaselineSpec(("amplitude", "lengthscale", "alpha"), _rq),
    "E": BaselineSpec(("amplitude", "lengthscale"), _exp),
    "EGAMMA": BaselineSpec(
        ("amplitude", "lengthscale", "gamma"),
        _gexp,
        (DEFAULT_BOUNDS, DEFAULT_BOUNDS, (1e-3, 2.0)),
    ),
    "PER": BaselineSpec(("amplitude", "lengthscale", "period"), _per),
    "LIN": BaselineSpec(("lengthscale", "shift"), _lin),
    "CON": BaselineSpec(("constant",), _con),
    "WN": BaselineSpec(("noise",), _wn),
}

_ALIASES = {"EΓ": "EGAMMA", "EG": "EGAMMA", "E_GAMMA": "EGAMMA"}


def baseline_kind(name: str) -> str:
    key = name.strip().upper()
    key = _ALIASES.get(key, key)
    if key not in BASELINES:
        raise ValueError(f"unknown baseline kernel {name!r}; choose from {sorted(BASELINES)}")
    return key


def validate_baseline(kind: str, theta) -> np.ndarray:
    spec = BASELINES[kind]
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(spec.params),):
        raise ValueError(f"{kind} takes {len(spec.params)} hyperparameters, got {theta.shape}")
    named = dict(zip(spec.params, theta))
    if named.get("lengthscale", 1.0) <= 0:
        raise ValueError(f"{kind}: lengthscale must be positive")
    if kind == "RQ" and named["alpha"] <= 0:
        raise ValueError("RQ: alpha must be positive")
    if kind == "EGAMMA" and not 0 < named["gamma"] <= 2:
        raise ValueError("EGAMMA: gamma must lie in (0, 2]")
    if kind == "PER" and named["period"] <= 0:
        raise ValueError("PER: period must be positive")
    return theta


def eval_baseline(kind: str, theta, x, xp, same: Optional[bool] = None) -> float:
    """Evaluate a reference kernel on one input pair.

    ``same`` decides the white-noise delta; by default the pair counts as the
    same point when the coordinates are identical.
    """
    kind = baseline_kind(kind)
    theta = validate_baseline(kind, theta)
    x, xp = _check_pair(x, xp)
    if same is None:
        same = bool(np.array_equal(x, xp))
    feats = PairFeatures(x[None, :]) if same else PairFeatures(x[None, :], xp[None, :])
    return float(BASELINES[kind].fn(theta, feats)[0, 0])


# ----------------------------------------------------------------------------
# expression trees

def _eval_node(node: Node, theta: Sequence[float], pos: int, feats: PairFeatures):
    name = node.name
    if name == "r":
        return feats.r(theta[pos]), pos + 1
    if name == "s":
        return feats.s(theta[pos], theta[pos + 1]), pos + 2
    if name == "hp":
        return np.full(feats.shape, float(theta[pos])), pos + 1
    if name == "wn":
        return theta[pos] * feats.delta(), pos + 1
    if name == "1":
        return np.ones(feats.shape), pos
    a, pos = _eval_node(node.children[0], theta, pos, feats)
    if name == "add":
        b, pos = _eval_node(node.children[1], theta, pos, feats)
        return a + b, pos
    if name == "mul":
        b, pos = _eval_node(node.children[1], theta, pos, feats)
        return a * b, pos
    if name == "expneg":
        return np.exp(-a), pos
    if name == "square":
        return a * a, pos
    if name == "sqrt":
        return np.sqrt(a), pos
    if name == "sin":
        return np.sin(a), pos
    raise ValueError(f"unknown primitive {name!r}")


def expr_covariance(expr: Node, theta, feats: PairFeatures) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (grammar.n_slots(expr),):
        raise ValueError(
            f"expression has {grammar.n_slots(expr)} slots, got {theta.size} values"
        )
    with np.errstate(all="ignore"):
        out, _ = _eval_node(expr, theta, 0, feats)
    if not np.all(np.isfinite(out)):
        raise EvaluationFault(f"non-finite covariance from {grammar.serialize(expr)}")
    return out


def eval_expr(expr: Node, theta, x, xp, same: Optional[bool] = None) -> float:
    x, xp = _check_pair(x, xp)
    if same is None:
        same = bool(np.array_equal(x, xp))
    feats = PairFeatures(x[None, :]) if same else PairFeatures(x[None, :], xp[None, :])
    return float(expr_covariance(expr, theta, feats)[0, 0])


# ----------------------------------------------------------------------------
# uniform wrapper used by the GP and optimizer layers

class Kernel:
    """A covariance family with a fixed number of positive hyperparameters."""

    label: str
    n_params: int

    def bounds(self) -> np.ndarray:
        return np.tile(DEFAULT_BOUNDS, (self.n_params, 1))

    def evaluate(self, theta, feats: PairFeatures) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, theta, feats: PairFeatures) -> np.ndarray:
        return self.evaluate(theta, feats)


class ExprKernel(Kernel):
    def __init__(self, expr: Node):
        self.expr = expr
        self.label = grammar.serialize(expr)
        self.n_params = grammar.n_slots(expr)

    def evaluate(self, theta, feats):
        return expr_covariance(self.expr, theta, feats)

    def __repr__(self):
        return f"ExprKernel({self.label!r})"


class BaselineKernel(Kernel):
    def __init__(self, kind: str):
        self.kind = baseline_kind(kind)
        self.spec = BASELINES[self.kind]
        self.label = self.kind
        self.n_params = len(self.spec.params)

    def bounds(self):
        return self.spec.param_bounds()

    def evaluate(self, theta, feats):
        theta = validate_baseline(self.kind, theta)
        with np.errstate(all="ignore"):
            out = self.spec.fn(theta, feats)
        if not np.all(np.isfinite(out)):
            raise EvaluationFault(f"non-finite covariance from {self.kind}")
        return out

    def __repr__(self):
        return f"BaselineKernel({self.kind!r})"


KernelLike = Union[Kernel, Node, str]


def as_kernel(k: KernelLike) -> Kernel:
    """Coerce a tree, a baseline name or a serialized tree into a :class:`Kernel`."""
    if isinstance(k, Kernel):
        return k
    if isinstance(k, Node):
        return ExprKernel(k)
    if isinstance(k, str):
        try:
            return BaselineKernel(k)
        except ValueError:
            return ExprKernel(grammar.parse(k))
    raise TypeError(f"cannot interpret {k!r} as a kernel")


def build_covariance(kernel: KernelLike, theta, X1, X2=None) -> np.ndarray:
    """Covariance matrix ``K(X1, X2)``; ``X2=None`` builds the exactly symmetric ``K(X1, X1)``."""
    kern = as_kernel(kernel)
    feats = PairFeatures(X1, X2)
    K = kern.evaluate(theta, feats)
    if feats.same:
        K = np.triu(K) + np.triu(K, 1).T
    return K


def covariance_diag(kernel: KernelLike, theta, X) -> np.ndarray:
    return as_kernel(kernel).evaluate(theta, PairFeatures(X, diag=True))
