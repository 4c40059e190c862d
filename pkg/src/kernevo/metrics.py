"""Predictive quality metrics and the cross-validated fitness of a kernel."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Dataset, make_folds
from .gp import LOG_2PI, GPModel, NotPSD
from .grammar import Node
from .hyperopt import AllRunsFailed, LMLObjective, OptBudget, optimize_hyperparams
from .kernels import EvaluationFault, KernelLike, as_kernel

VAR_FLOOR = 1e-12

Clock = Callable[[], float]


class DegenerateInput(ArithmeticError):
    """A correlation was requested for a constant vector."""


@dataclass(frozen=True)
class FitnessVector:
    neg_pcc: float
    nlpd: float
    eval_time: float

    @classmethod
    def faulted(cls) -> "FitnessVector":
        return cls(math.inf, math.inf, math.inf)

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.neg_pcc, self.nlpd, self.eval_time)


@dataclass
class EvaluatedIndividual:
    expr: Node
    theta: np.ndarray
    fitness: FitnessVector
    mean_lml: float
    bic: float
    generation: int = 0

    @property
    def is_viable(self) -> bool:
        return self.fitness.is_finite and math.isfinite(self.mean_lml)


def pcc(f, mu) -> float:
    """Pearson correlation between targets and predictive means."""
    f = np.asarray(f, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if f.shape != mu.shape or f.size < 2:
        raise ValueError("pcc needs two equally sized vectors of length >= 2")
    df = f - f.mean()
    dm = mu - mu.mean()
    sf = np.dot(df, df)
    sm = np.dot(dm, dm)
    # relative threshold: rounding noise on a constant vector is not signal
    if sf <= 1e-28 * max(1.0, np.dot(f, f)) or sm <= 1e-28 * max(1.0, np.dot(mu, mu)):
        raise DegenerateInput("correlation undefined for a constant vector")
    return float(np.clip(np.dot(df, dm) / math.sqrt(sf * sm), -1.0, 1.0))


def nlpd(f, mu, var) -> float:
    """Mean negative log predictive density, lower is better.

    This is the negated average Gaussian log-density of the targets, so a
    unit-variance exact prediction scores ``0.5 * log(2 pi)``.  Variances are
    floored at ``VAR_FLOOR``.
    """
    f = np.asarray(f, dtype=float)
    mu = np.asarray(mu, dtype=float)
    var = np.maximum(np.asarray(var, dtype=float), VAR_FLOOR)
    return float(np.mean(0.5 * (f - mu) ** 2 / var + 0.5 * np.log(var) + 0.5 * LOG_2PI))


def bic(lml: float, num_hyperparams: int, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return -2.0 * lml + num_hyperparams * math.log(n)


def fold_metrics(kernel, theta, X_train, f_train, X_test, f_test) -> tuple[float, float]:
    """Fit the posterior with frozen hyperparameters and score the held-out part."""
    model = GPModel(kernel, theta, X_train, f_train)
    pred = model.predict(X_test)
    return pcc(f_test, pred.mean), nlpd(f_test, pred.mean, pred.variance)


_FAULTS = (AllRunsFailed, NotPSD, EvaluationFault, DegenerateInput, np.linalg.LinAlgError)


def evaluate_fitness(
    expr: KernelLike,
    dataset: Dataset,
    k_folds: int = 3,
    budget: Optional[OptBudget] = None,
    rng: Optional[np.random.Generator] = None,
    clock: Optional[Clock] = None,
    fold_seed: int = 0,
) -> EvaluatedIndividual:
    """Cross-validated fitness of a kernel expression.

    Per fold the hyperparameters are tuned on the training part, then PCC and
    NLPD are measured on the held-out part.  Only the metric measurement is
    timed.  ``theta`` of the result is the set from the fold whose training
    LML was highest.  Any fault yields an all-infinite fitness.
    """
    kernel = as_kernel(expr)
    budget = budget or OptBudget()
    rng = rng if rng is not None else np.random.default_rng()
    clock = clock or time.perf_counter
    X, f = dataset.X, dataset.f
    folds = make_folds(len(f), k_folds, fold_seed)
    pccs, nlpds, lmls = [], [], []
    elapsed = 0.0
    best_theta, best_lml = np.full(kernel.n_params, np.nan), -math.inf
    try:
        for k in range(k_folds):
            test = folds.assignment == k
            train = ~test
            objective = LMLObjective(kernel, X[train], f[train], budget.bounds)
            opt = optimize_hyperparams(kernel, None, None, budget, rng, objective=objective)
            lmls.append(opt.best_lml)
            if opt.best_lml > best_lml:
                best_lml, best_theta = opt.best_lml, opt.theta
            t0 = clock()
            p, q = fold_metrics(kernel, opt.theta, X[train], f[train], X[test], f[test])
            elapsed += clock() - t0
            pccs.append(p)
            nlpds.append(q)
    except _FAULTS:
        return EvaluatedIndividual(expr, best_theta, FitnessVector.faulted(), -math.inf, math.inf)
    fitness = FitnessVector(-float(np.mean(pccs)), float(np.mean(nlpds)), max(elapsed, 0.0))
    if not fitness.is_finite:
        fitness = FitnessVector.faulted()
    mean_lml = float(np.mean(lmls))
    n_train = int(round(np.mean([np.sum(folds.assignment != k) for k in range(k_folds)])))
    return EvaluatedIndividual(
        expr, best_theta, fitness, mean_lml, bic(mean_lml, kernel.n_params, n_train)
    )
