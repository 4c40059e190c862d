"""Multi-objective evolution of kernel expressions.

Variation operators work on the typed expression trees of :mod:`kernevo.grammar`,
survivors are chosen by NSGA-II (non-dominated fronts, then crowding
distance), and :func:`moecov_run` drives the generational loop: it keeps
breeding from the best ``mu`` individuals while the best fitness still
improves by more than ``beta`` and replaces the population with fresh random
trees once it stalls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .grammar import (
    OPERATORS,
    GrammarConfig,
    Node,
    depth,
    gen_random_tree,
    iter_nodes,
    parse,
    random_terminal,
    replace,
    serialize,
)
from .hyperopt import OptBudget
from .metrics import Clock, EvaluatedIndividual, FitnessVector, evaluate_fitness

MAX_RETRIES = 10
COMBINERS = ("add", "mul")


class NoViableKernel(RuntimeError):
    """Every archived individual faulted."""


# ----------------------------------------------------------------------------
# variation

def _random_subtree(node: Node, rng: np.random.Generator) -> tuple[tuple[int, ...], Node]:
    nodes = list(iter_nodes(node))
    return nodes[rng.integers(len(nodes))]


def crossover(k1: Node, k2: Node, rng: np.random.Generator, max_depth: int = 8) -> Node:
    """Join a random subtree of each parent under ``add`` or ``mul``.

    Subtrees are re-drawn when the child would be deeper than ``max_depth``;
    after ``MAX_RETRIES`` failures the first parent is returned unchanged.
    """
    for _ in range(MAX_RETRIES):
        _, s1 = _random_subtree(k1, rng)
        _, s2 = _random_subtree(k2, rng)
        child = Node(COMBINERS[rng.integers(2)], (s1, s2))
        if depth(child) <= max_depth:
            return child
    return k1


def _operators(node: Node) -> list[tuple[tuple[int, ...], Node]]:
    return [(p, n) for p, n in iter_nodes(node) if n.children]


def _insert(k: Node, rng: np.random.Generator, grammar: GrammarConfig) -> Node:
    # wrap a subtree as one input of a new operator; other inputs are terminals
    path, sub = _random_subtree(k, rng)
    name = list(OPERATORS)[rng.integers(len(OPERATORS))]
    arity = OPERATORS[name]
    slot = rng.integers(arity)
    children = tuple(sub if i == slot else random_terminal(grammar, rng) for i in range(arity))
    return replace(k, path, Node(name, children))


def _shrink(k: Node, rng: np.random.Generator, grammar: GrammarConfig) -> Node:
    branches = _operators(k)
    path, node = branches[rng.integers(len(branches))]
    return replace(k, path, node.children[rng.integers(len(node.children))])


def _uniform(k: Node, rng: np.random.Generator, grammar: GrammarConfig) -> Node:
    path, _ = _random_subtree(k, rng)
    budget = max(grammar.max_depth - len(path), 0)
    return replace(k, path, gen_random_tree(grammar, rng, max_depth=budget))


def _node_replacement(k: Node, rng: np.random.Generator, grammar: GrammarConfig) -> Node:
    branches = _operators(k)
    path, node = branches[rng.integers(len(branches))]
    same = [o for o, a in OPERATORS.items() if a == len(node.children) and o != node.name]
    return replace(k, path, Node(same[rng.integers(len(same))], node.children))


MUTATIONS: dict[str, Callable[[Node, np.random.Generator, GrammarConfig], Node]] = {
    "insert": _insert,
    "shrink": _shrink,
    "uniform": _uniform,
    "node_replacement": _node_replacement,
}


def applicable_mutations(k: Node) -> list[str]:
    """Sub-operators that can act on ``k``; shrink and node replacement need an operator."""
    if k.children:
        return list(MUTATIONS)
    return ["insert", "uniform"]


def mutate(k: Node, rng: np.random.Generator, grammar: Optional[GrammarConfig] = None) -> Node:
    """Apply one uniformly chosen applicable mutation, keeping within ``max_depth``."""
    grammar = grammar or GrammarConfig()
    choices = applicable_mutations(k)
    for _ in range(MAX_RETRIES):
        child = MUTATIONS[choices[rng.integers(len(choices))]](k, rng, grammar)
        if depth(child) <= grammar.max_depth:
            return child
    return k


# ----------------------------------------------------------------------------
# NSGA-II

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """Pareto dominance for minimization."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(fitnesses: Sequence[Sequence[float]]) -> list[list[int]]:
    """Split indices into successive non-dominated fronts, each in ascending order."""
    n = len(fitnesses)
    F = np.asarray(fitnesses, dtype=float).reshape(n, -1)
    dominated_by = [[] for _ in range(n)]
    counts = np.zeros(n, dtype=int)
    for i in range(n):
        le = np.all(F[i] <= F, axis=1)
        lt = np.any(F[i] < F, axis=1)
        ge = np.all(F[i] >= F, axis=1)
        gt = np.any(F[i] > F, axis=1)
        dominated_by[i] = np.flatnonzero(le & lt).tolist()
        counts[i] = int(np.sum(ge & gt))
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(front_fitnesses: Sequence[Sequence[float]]) -> np.ndarray:
    """NSGA-II crowding distance of each member of one front.

    Per objective the extreme members (first and last after a stable sort)
    get infinity; others add the gap between their neighbours divided by the
    objective's range.  A zero or non-finite range adds nothing.
    """
    F = np.asarray(front_fitnesses, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    n, m = F.shape
    dist = np.zeros(n)
    if n == 0:
        return dist
    for j in range(m):
        order = np.argsort(F[:, j], kind="stable")
        col = F[order, j]
        dist[order[0]] = dist[order[-1]] = math.inf
        if n < 3 or not (np.isfinite(col[0]) and np.isfinite(col[-1])) or col[-1] <= col[0]:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / (col[-1] - col[0])
    return dist


def nsga2_order(fitnesses: Sequence[Sequence[float]], count: int) -> list[int]:
    """Indices of the ``count`` individuals NSGA-II keeps, best first."""
    if not 0 <= count <= len(fitnesses):
        raise ValueError(f"cannot select {count} of {len(fitnesses)}")
    chosen: list[int] = []
    for front in fast_nondominated_sort(fitnesses):
        if len(chosen) == count:
            break
        cd = crowding_distance([fitnesses[i] for i in front])
        # descending distance, lower index first on ties
        ranked = [front[k] for k in sorted(range(len(front)), key=lambda k: (-cd[k], front[k]))]
        chosen.extend(ranked[: count - len(chosen)])
    return chosen


@dataclass
class Population:
    individuals: list[EvaluatedIndividual]
    generation: int = 0

    def fitnesses(self) -> list[tuple[float, float, float]]:
        return [ind.fitness.as_tuple() for ind in self.individuals]

    def __len__(self) -> int:
        return len(self.individuals)


def nsga2_select(pop: Union[Population, Sequence[EvaluatedIndividual]], count: int) -> list[EvaluatedIndividual]:
    members = pop.individuals if isinstance(pop, Population) else list(pop)
    return [members[i] for i in nsga2_order([m.fitness.as_tuple() for m in members], count)]


# ----------------------------------------------------------------------------
# generational loop

def relative_improvement(prev: Sequence[float], cur: Sequence[float]) -> np.ndarray:
    """Componentwise ``(prev - cur) / |cur|``, positive when ``cur`` is better.

    A zero ``cur`` gives +inf if it improved on ``prev`` and 0 otherwise; two
    equal values (infinite ones included) give 0.
    """
    out = []
    for p, c in zip(prev, cur):
        if p == c:
            out.append(0.0)
        elif c == 0.0 or math.isinf(p) or math.isinf(c):
            out.append(math.inf if p > c else (0.0 if c == 0.0 else -math.inf))
        else:
            out.append((p - c) / abs(c))
    return np.array(out, dtype=float)


def update_tracked(tracked: Sequence[float], current: Sequence[float]) -> np.ndarray:
    """Mean of the tracked and current best fitness.

    A non-finite tracked component (the state right after a start or a
    restart) is replaced by the current value instead of averaged, since the
    mean with infinity would stay infinite and block every later restart.
    """
    t = np.asarray(tracked, dtype=float)
    c = np.asarray(current, dtype=float)
    return np.where(np.isfinite(t), 0.5 * (t + c), c)


@dataclass
class MOECovConfig:
    N: int = 38
    G: int = 65
    mu: int = 9
    p_m: float = 0.4
    p_cx: float = 0.6
    beta: float = 1e-5
    O: int = 2
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    budget: OptBudget = field(default_factory=OptBudget)
    seed: int = 0
    k_folds: int = 3
    select_by: str = "lml"

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("population size N must be >= 2")
        if self.G < 1:
            raise ValueError("need at least one generation")
        if not 1 <= self.mu < self.N:
            raise ValueError("need 1 <= mu < N")
        if not (0 <= self.p_m <= 1 and math.isclose(self.p_m + self.p_cx, 1.0)):
            raise ValueError("p_m and p_cx must be probabilities summing to 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.O not in (2, 3):
            raise ValueError("O must be 2 or 3")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.select_by not in ("lml", "bic"):
            raise ValueError("select_by must be 'lml' or 'bic'")


def select_best(archive: Iterable[EvaluatedIndividual], criterion: str = "lml") -> EvaluatedIndividual:
    """Highest mean LML (or lowest BIC) among viable individuals, earliest on ties."""
    viable = [ind for ind in archive if ind.is_viable]
    if not viable:
        raise NoViableKernel("every archived kernel faulted")
    if criterion == "lml":
        return max(viable, key=lambda ind: ind.mean_lml)
    if criterion == "bic":
        return min(viable, key=lambda ind: ind.bic)
    raise ValueError(f"unknown criterion {criterion!r}")


@dataclass
class RunResult:
    best: EvaluatedIndividual
    archive: list[EvaluatedIndividual]
    restarts: int


Mapper = Callable[..., Iterable]


def _evaluate_batch(exprs, generation, cfg, dataset, rng, clock, fold_seed, mapper):
    seeds = rng.integers(0, 2**63 - 1, size=len(exprs))
    results = list(
        mapper(
            _evaluate_one,
            exprs,
            seeds,
            [dataset] * len(exprs),
            [cfg] * len(exprs),
            [clock] * len(exprs),
            [fold_seed] * len(exprs),
        )
    )
    for ind in results:
        ind.generation = generation
    return results


def _evaluate_one(expr, seed, dataset, cfg, clock, fold_seed):
    return evaluate_fitness(
        expr, dataset, cfg.k_folds, cfg.budget, np.random.default_rng(seed), clock, fold_seed
    )


def _variate(parents: list[EvaluatedIndividual], cfg: MOECovConfig, rng) -> list[Node]:
    offspring = []
    for _ in range(cfg.N):
        if rng.random() < cfg.p_m:
            parent = parents[rng.integers(len(parents))].expr
            offspring.append(mutate(parent, rng, cfg.grammar))
        else:
            a = parents[rng.integers(len(parents))].expr
            b = parents[rng.integers(len(parents))].expr
            offspring.append(crossover(a, b, rng, cfg.grammar.max_depth))
    return offspring


def moecov_run(
    cfg: MOECovConfig,
    dataset: Dataset,
    clock: Optional[Clock] = None,
    mapper: Mapper = map,
    on_generation: Optional[Callable[[int, list[EvaluatedIndividual]], None]] = None,
) -> RunResult:
    """Evolve kernels on ``dataset`` for ``cfg.G`` generations.

    Each generation scores the new offspring, takes the NSGA-II best of the
    current population and compares its first ``cfg.O`` objectives with the
    tracked best.  If some objective improved by more than ``beta`` the ``mu``
    NSGA-II best breed ``N`` offspring; otherwise the population is replaced
    by ``N`` random trees.  Every scored individual is archived and the final
    pick comes from the whole archive.  ``mapper`` may be swapped for a
    parallel map; evaluation seeds are drawn up front so results do not
    depend on execution order.
    """
    rng = np.random.default_rng(cfg.seed)
    fold_seed = int(rng.integers(2**31))
    random_pop = lambda: [gen_random_tree(cfg.grammar, rng) for _ in range(cfg.N)]  # noqa: E731

    offspring = random_pop()
    survivors: list[EvaluatedIndividual] = []
    archive: list[EvaluatedIndividual] = []
    tracked = np.full(cfg.O, math.inf)
    restarts = 0
    for gen in range(cfg.G - 1):
        scored = _evaluate_batch(offspring, gen, cfg, dataset, rng, clock, fold_seed, mapper)
        archive.extend(scored)
        if on_generation:
            on_generation(gen, scored)
        pop = survivors + scored
        best = nsga2_select(pop, 1)[0]
        current = np.array(best.fitness.as_tuple()[: cfg.O])
        if np.max(relative_improvement(tracked, current)) > cfg.beta:
            survivors = nsga2_select(pop, cfg.mu)
            offspring = _variate(survivors, cfg, rng)
            tracked = update_tracked(tracked, current)
        else:
            restarts += 1
            survivors = []
            offspring = random_pop()
            tracked = np.full(cfg.O, math.inf)
    scored = _evaluate_batch(offspring, cfg.G - 1, cfg, dataset, rng, clock, fold_seed, mapper)
    archive.extend(scored)
    if on_generation:
        on_generation(cfg.G - 1, scored)
    return RunResult(select_best(archive, cfg.select_by), archive, restarts)


# ----------------------------------------------------------------------------
# archive persistence

def _num(x: float):
    return float(x) if math.isfinite(x) else None


def individual_to_record(ind: EvaluatedIndividual) -> dict:
    """JSON-ready record; non-finite numbers become ``null``."""
    return {
        "expr": serialize(ind.expr),
        "theta": [_num(t) for t in np.asarray(ind.theta, dtype=float)],
        "fitness": [_num(v) for v in ind.fitness.as_tuple()],
        "mean_lml": _num(ind.mean_lml),
        "bic": _num(ind.bic),
        "generation": int(ind.generation),
    }


def record_to_individual(rec: dict) -> EvaluatedIndividual:
    def val(x, missing):
        return missing if x is None else float(x)

    return EvaluatedIndividual(
        expr=parse(rec["expr"]),
        theta=np.array([val(t, math.nan) for t in rec["theta"]], dtype=float),
        fitness=FitnessVector(*(val(v, math.inf) for v in rec["fitness"])),
        mean_lml=val(rec["mean_lml"], -math.inf),
        bic=val(rec["bic"], math.inf),
        generation=int(rec.get("generation", 0)),
    )


def dump_archive(archive: Iterable[EvaluatedIndividual], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ind in archive:
            fh.write(json.dumps(individual_to_record(ind)) + "\n")


def load_archive(path: Union[str, Path]) -> list[EvaluatedIndividual]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_individual(json.loads(line)) for line in fh if line.strip()]
