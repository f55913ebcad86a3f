"""
Feature-space evasion attack driven by a genetic algorithm.

An individual is a fixed-length vector of signed manipulation genes: gene
``g >= 0`` adds feature g, gene ``~i`` (that is -i - 1) removes feature i.
Fitness is the target system's malware score on the manipulated sample, so
lower is better. The attack only ever sees ``score`` and ``label``.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from cascade import Label
from evaluation import ConfusionCounts, tpr
from features import FeatureSpace, SparseBinaryVector, hamming_distance
from utils import AttackError, DataError, InvariantViolation, make_rng

logger = logging.getLogger(__name__)


class GaConfig(BaseModel):
    population_size: int = Field(default=100, ge=2)
    generations: int = Field(default=50, ge=1)
    tournament_size: int = Field(default=3, ge=1)
    crossover_prob: float = Field(default=0.7, ge=0.0, le=1.0)
    mutation_prob: float = Field(default=1.0, ge=0.0, le=1.0)
    per_gene_mutation_prob: Optional[float] = Field(default=None, ge=0.0, le=1.0, description="None means 1/budget")
    addition_bias: float = Field(default=0.9, ge=0.0, le=1.0)
    elitism: bool = False
    early_stop: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def check_tournament(self):
        if self.tournament_size > self.population_size:
            raise ValueError("tournament_size cannot exceed population_size")
        return self


def removal_gene(index: int) -> int:
    return ~index


def gene_feature(gene: int) -> int:
    return gene if gene >= 0 else ~gene


@dataclass(frozen=True)
class ManipulationSpace:
    additions: Tuple[int, ...]
    removals: Tuple[int, ...]
    dimension: int
    _positions: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for index in (*self.additions, *self.removals):
            if not 0 <= index < self.dimension:
                raise DataError(f"gene index {index} outside [0, {self.dimension})")
        object.__setattr__(self, "_positions", {g: i for i, g in enumerate(self.genes)})

    @property
    def genes(self) -> Tuple[int, ...]:
        return tuple(self.additions) + tuple(removal_gene(i) for i in self.removals)

    def __len__(self) -> int:
        return len(self.additions) + len(self.removals)

    def __contains__(self, gene: int) -> bool:
        return gene in self._positions

    def position(self, gene: int) -> int:
        return self._positions[gene]


@dataclass(frozen=True)
class Individual:
    genes: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.genes)


@dataclass(frozen=True)
class AttackResult:
    best_individual: Optional[Individual]
    best_score: float
    evaded: bool
    generations_run: int
    query_count: int
    adversarial: SparseBinaryVector
    best_history: Tuple[float, ...] = ()


class CountingOracle:
    """Wraps a score function and counts every invocation."""

    def __init__(self, score: Callable[[SparseBinaryVector], float]):
        self._score = score
        self.query_count = 0

    def __call__(self, x: SparseBinaryVector) -> float:
        self.query_count += 1
        return float(self._score(x))


# ── Search space and operators ──────────────────────────────────────────────

def build_manipulation_space(goodware: Sequence[SparseBinaryVector], feature_space: FeatureSpace,
                             x: SparseBinaryVector) -> ManipulationSpace:
    """
    Additions: goodware features absent from x. Removals: features of x in
    categories that allow removal.
    """
    if not goodware:
        raise DataError("the goodware pool is empty")
    present = set(x.active)
    pool = set()
    for sample in goodware:
        pool.update(sample.active)
    additions = tuple(sorted(pool - present))
    removals = tuple(i for i in x.active if feature_space.is_removable(i))
    if not additions and not removals:
        raise AttackError("empty manipulation space for this sample")
    return ManipulationSpace(additions, removals, feature_space.dimension)


def init_population(space: ManipulationSpace, budget: int, config: GaConfig,
                    rng: np.random.Generator) -> List[Individual]:
    """Genes drawn with replacement, addition genes favoured when both kinds exist."""
    if len(space) == 0:
        raise AttackError("cannot seed a population from an empty manipulation space")
    if budget < 1:
        raise AttackError(f"budget must be >= 1, got {budget}")
    additions = np.asarray(space.additions, dtype=np.int64)
    removals = np.asarray([removal_gene(i) for i in space.removals], dtype=np.int64)
    shape = (config.population_size, budget)
    if additions.size and removals.size:
        use_addition = rng.random(shape) < config.addition_bias
        added = additions[rng.integers(0, additions.size, size=shape)]
        removed = removals[rng.integers(0, removals.size, size=shape)]
        genes = np.where(use_addition, added, removed)
    else:
        source = additions if additions.size else removals
        genes = source[rng.integers(0, source.size, size=shape)]
    return [Individual(tuple(int(g) for g in row)) for row in genes]


def apply_manipulations(x: SparseBinaryVector, individual: Individual) -> SparseBinaryVector:
    """Set semantics: additions insert, removals erase; repeats are idempotent."""
    active = set(x.active)
    for gene in individual.genes:
        if gene >= 0:
            active.add(gene)
        else:
            active.discard(~gene)
    return SparseBinaryVector(tuple(sorted(active)), x.dimension)


def fitness(oracle: Callable[[SparseBinaryVector], float], x: SparseBinaryVector, individual: Individual,
            space: Optional[ManipulationSpace] = None) -> float:
    """Oracle score of the manipulated sample (minimised)."""
    if space is not None and any(g not in space for g in individual.genes):
        raise InvariantViolation("individual carries a gene outside the manipulation space")
    candidate = apply_manipulations(x, individual)
    if hamming_distance(x, candidate) > len(individual):
        raise InvariantViolation("candidate exceeds the manipulation budget")
    return oracle(candidate)


def swap_positions(a: Individual, b: Individual, positions: Iterable[int]) -> Tuple[Individual, Individual]:
    """Exchange the genes of *a* and *b* at the given positions."""
    if len(a) != len(b):
        raise AttackError("crossover needs parents of equal length")
    left, right = list(a.genes), list(b.genes)
    for position in positions:
        left[position], right[position] = right[position], left[position]
    return Individual(tuple(left)), Individual(tuple(right))


def crossover(a: Individual, b: Individual, rng: np.random.Generator,
              crossover_prob: float = 1.0) -> Tuple[Individual, Individual]:
    """Uniform crossover: each position swaps with probability 1/2."""
    if len(a) != len(b):
        raise AttackError("crossover needs parents of equal length")
    if rng.random() >= crossover_prob:
        return a, b
    chosen = np.flatnonzero(rng.random(len(a)) < 0.5)
    return swap_positions(a, b, chosen.tolist())


def mutate(individual: Individual, space: ManipulationSpace, config: GaConfig, rng: np.random.Generator,
           per_gene_prob: Optional[float] = None) -> Individual:
    """Replace each gene, with the per-gene probability, by a different valid gene."""
    if per_gene_prob is None:
        per_gene_prob = config.per_gene_mutation_prob
        if per_gene_prob is None:
            per_gene_prob = 1.0 / max(len(individual), 1)
    pool = space.genes
    if len(pool) < 2:
        return individual
    genes = list(individual.genes)
    for position in np.flatnonzero(rng.random(len(genes)) < per_gene_prob):
        current = space.position(genes[position])
        draw = int(rng.integers(0, len(pool) - 1))
        if draw >= current:
            draw += 1
        genes[position] = pool[draw]
    return Individual(tuple(genes))


def tournament_select(population: Sequence[Individual], fitnesses: Sequence[float], size: int,
                      rng: np.random.Generator) -> Individual:
    """Draw ``size`` contestants with replacement; the lowest fitness wins, first drawn on ties."""
    if len(population) != len(fitnesses) or not population:
        raise AttackError("population and fitness lists must be non-empty and aligned")
    contestants = rng.integers(0, len(population), size=size)
    winner = int(contestants[0])
    for index in contestants[1:]:
        if fitnesses[index] < fitnesses[winner]:
            winner = int(index)
    return population[winner]


# ── Attack loop ─────────────────────────────────────────────────────────────

def _unperturbed(oracle: CountingOracle, labeler, x: SparseBinaryVector) -> AttackResult:
    score = oracle(x)
    evaded = labeler(x) == Label.GOODWARE
    return AttackResult(None, score, evaded, 0, oracle.query_count, x, (score,))


def run_attack(oracle, labeler: Callable[[SparseBinaryVector], Label], x: SparseBinaryVector, budget: int,
               space: ManipulationSpace, config: GaConfig,
               rng: Optional[np.random.Generator] = None) -> AttackResult:
    """
    Generational GA: evaluate, tournament-select, crossover, mutate.

    The best individual ever evaluated is reported. With ``early_stop`` the
    search ends on the first generation whose best candidate evades.
    """
    counter = oracle if isinstance(oracle, CountingOracle) else CountingOracle(oracle)
    if rng is None:
        rng = make_rng(config.seed)
    if budget == 0 or len(space) == 0:
        if len(space) == 0:
            logger.warning("Empty manipulation space; returning the unperturbed sample")
        return _unperturbed(counter, labeler, x)

    per_gene = config.per_gene_mutation_prob
    if per_gene is None:
        per_gene = 1.0 / budget
    population = init_population(space, budget, config, rng)
    best: Optional[Individual] = None
    best_score = np.inf
    history: List[float] = []
    evaded = False
    generations_run = 0

    for generation in range(config.generations):
        scores = [fitness(counter, x, individual, space) for individual in population]
        leader = int(np.argmin(scores))
        if scores[leader] < best_score:
            best, best_score = population[leader], scores[leader]
            evaded = labeler(apply_manipulations(x, best)) == Label.GOODWARE
        history.append(float(best_score))
        generations_run = generation + 1
        if (evaded and config.early_stop) or generation == config.generations - 1:
            break

        offspring: List[Individual] = []
        if config.elitism:
            offspring.append(best)
        while len(offspring) < config.population_size:
            first = tournament_select(population, scores, config.tournament_size, rng)
            second = tournament_select(population, scores, config.tournament_size, rng)
            first, second = crossover(first, second, rng, config.crossover_prob)
            for child in (first, second):
                if rng.random() < config.mutation_prob:
                    child = mutate(child, space, config, rng, per_gene)
                offspring.append(child)
        population = offspring[:config.population_size]

    adversarial = apply_manipulations(x, best)
    return AttackResult(best, float(best_score), evaded, generations_run, counter.query_count,
                        adversarial, tuple(history))


# ── Dataset-level evaluation ────────────────────────────────────────────────

@dataclass(frozen=True)
class AttackRecord:
    sample_id: int
    budget: int
    evaded: bool
    score: float
    queries: int
    generations: int
    detected: bool


@dataclass
class AttackSummary:
    tpr: Dict[int, float]
    records: List[AttackRecord] = field(default_factory=list)

    def records_for(self, budget: int) -> List[AttackRecord]:
        return [r for r in self.records if r.budget == budget]


def attack_dataset(system, malware_samples: Sequence[SparseBinaryVector], budgets: Iterable[int],
                   goodware_pool: Sequence[SparseBinaryVector], feature_space: FeatureSpace,
                   config: GaConfig, sample_ids: Optional[Sequence[int]] = None) -> AttackSummary:
    """
    TPR under attack for every budget (budget 0 is the clean TPR).

    Samples the system already misses count as undetected without running
    the GA. Each attack uses its own seeded stream.
    """
    if not malware_samples:
        raise DataError("attack_dataset needs at least one malware sample")
    if sample_ids is None:
        sample_ids = list(range(len(malware_samples)))
    clean_labels = [system.label(x) for x in malware_samples]
    summary = AttackSummary(tpr={})

    for budget in sorted({0, *budgets}):
        if budget < 0:
            raise AttackError(f"budgets must be >= 0, got {budget}")
        detected = 0
        for position, (sample_id, x) in enumerate(zip(sample_ids, malware_samples)):
            if clean_labels[position] == Label.GOODWARE or budget == 0:
                still_detected = clean_labels[position] == Label.MALWARE
                record = AttackRecord(sample_id, budget, False, system.score(x), 0, 0, still_detected)
            else:
                try:
                    space = build_manipulation_space(goodware_pool, feature_space, x)
                except AttackError:
                    space = ManipulationSpace((), (), feature_space.dimension)
                result = run_attack(CountingOracle(system.score), system.label, x, budget, space, config,
                                    rng=make_rng(config.seed, budget, position))
                still_detected = system.label(result.adversarial) == Label.MALWARE
                record = AttackRecord(sample_id, budget, result.evaded, result.best_score,
                                      result.query_count, result.generations_run, still_detected)
                logger.info(
                    "attack_result sample=%d budget=%d evaded=%s score=%.6f queries=%d generations=%d",
                    sample_id, budget, result.evaded, result.best_score, result.query_count,
                    result.generations_run,
                )
            detected += int(still_detected)
            summary.records.append(record)
        summary.tpr[budget] = tpr(ConfusionCounts(tp=detected, fn=len(malware_samples) - detected))
        logger.info("budget=%d TPR under attack=%.4f", budget, summary.tpr[budget])
    return summary
