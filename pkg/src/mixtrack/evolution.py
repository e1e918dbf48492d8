"""Evolutionary selection of discrete choice codes under a fitness reward.

Codes are flat tuples over a (slot count, choice count) space; the
tracking pipeline converts to and from its structured path codes at the
boundary. The engine is a plain generational loop: evaluate, keep
elites, refill with uniform crossover of tournament-selected parents
and per-slot mutation. Fitness values are cached by code, cache hits do
not consume evaluation budget, and every tie breaks toward the
lexicographically smallest code so a fixed seed reproduces the run
bit-exactly.

Evaluations inside one generation are independent reads of shared
weights and may run concurrently; the loop itself is sequential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True)
class SearchSpace:
    slots: int
    choices: int

    @property
    def size(self):
        return self.choices**self.slots


@dataclass
class Candidate:
    code: tuple
    fitness: float | None = None


@dataclass(frozen=True)
class EvoConfig:
    population: int = 16
    generations: int = 20
    mutation_prob: float | None = None  # default 1/slots
    crossover_rate: float = 0.5
    elites: int = 2
    tournament: int = 3
    budget: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be at least 1")
        if self.elites >= self.population and self.population > 1:
            raise ValueError("elite count must be smaller than the population")
        if self.budget < self.population:
            raise ValueError("evaluation budget must cover at least one population")


@dataclass
class GenerationRecord:
    gen: int
    best_fitness: float
    mean_fitness: float
    evals_used: int

    def as_line(self):
        return f"{self.gen},{self.best_fitness:.17g},{self.mean_fitness:.17g},{self.evals_used}"


class _Evaluator:
    """Budgeted, cached wrapper around the raw fitness function."""

    def __init__(self, fn, budget):
        self.fn = fn
        self.budget = budget
        self.cache = {}
        self.used = 0

    def __call__(self, code):
        if code in self.cache:
            return self.cache[code]
        if self.used >= self.budget:
            return None
        self.used += 1
        value = float(self.fn(code))
        self.cache[code] = value
        return value


def _better(a, b):
    """True if candidate a beats b: higher fitness, ties to the lex-smaller code."""
    if b is None:
        return True
    if a.fitness != b.fitness:
        return a.fitness > b.fitness
    return a.code < b.code


def _rank_key(c):
    return (-c.fitness, c.code)


def evolve(space, evaluator, cfg, _encode=None, _decode=None):
    """Generational search; returns (best Candidate, per-generation history).

    ``evaluator`` maps a code tuple to a fitness in [0, 1] and must be
    deterministic for a fixed seed. The search never calls it more than
    ``cfg.budget`` times; repeated codes hit the cache instead.
    """
    rng = np.random.default_rng(cfg.seed)
    ev = _Evaluator(evaluator, cfg.budget)
    slots, choices = space.slots, space.choices
    p_m = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / slots

    def random_code():
        return tuple(int(x) for x in rng.integers(0, choices, slots))

    def mutate(code):
        out = list(code)
        for i in range(slots):
            if rng.random() < p_m:
                out[i] = int(rng.integers(0, choices))
        return tuple(out)

    def crossover(a, b):
        take_b = rng.random(slots) < 0.5
        return tuple(b[i] if take_b[i] else a[i] for i in range(slots))

    def tournament(pop):
        picks = rng.integers(0, len(pop), size=min(cfg.tournament, len(pop)))
        best = None
        for i in picks:
            if best is None or _better(pop[int(i)], best):
                best = pop[int(i)]
        return best

    population = []
    seen = set()
    while len(population) < cfg.population:
        code = random_code()
        if code in seen and len(seen) < space.size:
            continue
        seen.add(code)
        fitness = ev(code)
        if fitness is None:
            break
        population.append(Candidate(code, fitness))
    if not population:
        raise ValueError("evaluation budget exhausted before any candidate was scored")

    best = min(population, key=_rank_key)
    history = []
    for gen in range(cfg.generations):
        population.sort(key=_rank_key)
        if _better(population[0], best):
            best = population[0]
        history.append(
            GenerationRecord(
                gen=gen,
                best_fitness=best.fitness,
                mean_fitness=float(np.mean([c.fitness for c in population])),
                evals_used=ev.used,
            )
        )
        if ev.used >= cfg.budget:
            break
        next_pop = population[: cfg.elites]
        while len(next_pop) < cfg.population:
            parent = tournament(population)
            child = parent.code
            if rng.random() < cfg.crossover_rate:
                child = crossover(child, tournament(population).code)
            child = mutate(child)
            fitness = ev(child)
            if fitness is None:
                break
            next_pop.append(Candidate(child, fitness))
        population = next_pop
        if ev.used >= cfg.budget and len(population) <= cfg.elites:
            break

    population.sort(key=_rank_key)
    if population and _better(population[0], best):
        best = population[0]
    return best, history


def brute_force(space, evaluator):
    """Exhaustive argmax with lexicographically-smallest tie-break."""
    if space.size > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"search space has {space.size} codes, refusing brute force beyond {BRUTE_FORCE_LIMIT}"
        )
    best = None
    for code in product(range(space.choices), repeat=space.slots):
        cand = Candidate(code, float(evaluator(code)))
        if best is None or _better(cand, best):
            best = cand
    return best


def symmetric_constrained_evolve(space, evaluator, cfg):
    """As evolve, but the two code halves stay identical (one shared half-code)."""
    if space.slots % 2 != 0:
        raise ValueError("symmetric search needs an even slot count")
    half = SearchSpace(space.slots // 2, space.choices)
    best_half, history = evolve(half, lambda h: evaluator(h + h), cfg)
    return Candidate(best_half.code + best_half.code, best_half.fitness), history


def random_search(space, evaluator, budget, seed):
    """Baseline: uniform random codes under the same budget (with caching)."""
    rng = np.random.default_rng(seed)
    ev = _Evaluator(evaluator, budget)
    best = None
    while ev.used < budget:
        code = tuple(int(x) for x in rng.integers(0, space.choices, space.slots))
        fitness = ev(code)
        if fitness is None:
            break
        cand = Candidate(code, fitness)
        if _better(cand, best):
            best = cand
    return best


def planted_fitness(hidden):
    """Verification oracle: fraction of slots matching a hidden code."""
    hidden = tuple(hidden)

    def fitness(code):
        return sum(1 for a, b in zip(code, hidden) if a == b) / len(hidden)

    return fitness


def write_history(path, history):
    with open(path, "w") as f:
        f.write("gen,best_fitness,mean_fitness,evals_used\n")
        for rec in history:
            f.write(rec.as_line() + "\n")
