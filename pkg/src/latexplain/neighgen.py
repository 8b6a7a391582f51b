"""Latent neighborhood generation by genetic search.

Two populations evolve around the latent point ``z``: one rewarded for
keeping the black-box label of the explained image, one for changing it.
Both prefer points close to ``z`` and penalise ``z`` itself. The merged
survivors are validity-gated by the discriminator, decoded and labelled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import aae as aae_mod
from .errors import GenerationError
from .seeding import derive_seed

log = logging.getLogger(__name__)

SAME_TOL = 1e-9


@dataclass
class GenConfig:
    N: int = 200
    balance: float = 0.5
    population: int = 100
    generations: int = 20
    crossover_prob: float = 0.5
    mutation_prob: float = 0.2
    mutation_sigma: float = 0.5
    validity_threshold: float = 0.5
    tournament_size: int = 3
    elite_fraction: float = 0.1
    oversampling: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        for name in ("balance", "crossover_prob", "mutation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mutation_sigma <= 0:
            raise ValueError("mutation_sigma must be positive")
        if self.population < 1:
            raise ValueError("population must be positive")


@dataclass
class Neighborhood:
    latents: np.ndarray  # H, (N, k)
    decoded: np.ndarray  # H~, (N, n)
    labels: np.ndarray  # b(H~), (N,)
    target_label: int  # b(x)
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def same(self) -> np.ndarray:
        return self.labels == self.target_label

    @property
    def n_same(self) -> int:
        return int(self.same.sum())

    @property
    def n_diff(self) -> int:
        return len(self) - self.n_same


def squashed_distance(z, h) -> np.ndarray:
    """Euclidean distance mapped into [0, 1) by d / (1 + d)."""
    d = np.linalg.norm(np.asarray(h, dtype=np.float64) - np.asarray(z, dtype=np.float64), axis=-1)
    return d / (1.0 + d)


def _is_z(z, h) -> np.ndarray:
    return np.max(np.abs(np.asarray(h) - np.asarray(z)), axis=-1) < SAME_TOL


def _fitness(latents, z, labels, target, same: bool) -> np.ndarray:
    hit = (labels == target) if same else (labels != target)
    return hit.astype(np.float64) + (1.0 - squashed_distance(z, latents)) - _is_z(z, latents)


def _target(z, bb, model, target_label):
    if target_label is not None:
        return int(target_label)
    return bb.classify_one(aae_mod.decode(model, z))


def fitness_same(h, z, bb, model, target_label: int | None = None) -> float:
    """1[b(decode(h)) = b(x)] + (1 - d(z, h)) - 1[h = z]."""
    label = bb.classify_one(aae_mod.decode(model, h))
    return float(_fitness(np.asarray(h, float), z, np.asarray(label), _target(z, bb, model, target_label), True))


def fitness_diff(h, z, bb, model, target_label: int | None = None) -> float:
    """1[b(decode(h)) != b(x)] + (1 - d(z, h)) - 1[h = z]."""
    label = bb.classify_one(aae_mod.decode(model, h))
    return float(_fitness(np.asarray(h, float), z, np.asarray(label), _target(z, bb, model, target_label), False))


def _label_latents(latents, bb, model):
    if len(latents) == 0:
        return np.zeros((0, model.n)), np.zeros(0, dtype=np.int64)
    decoded = aae_mod.decode(model, latents)
    return decoded, np.asarray(bb.classify(decoded), dtype=np.int64)


def _tournament(rng, fit, count, size):
    picks = rng.integers(0, len(fit), size=(count, size))
    # argmax keeps the first contender on ties
    return picks[np.arange(count), np.argmax(fit[picks], axis=1)]


def _canonical_order(latents, fit):
    # descending fitness, then lexicographic on coordinates
    keys = [latents[:, j] for j in range(latents.shape[1] - 1, -1, -1)]
    return np.lexsort(keys + [-fit])


def evolve(z, bb, model, cfg: GenConfig, target: int, same: bool, rng) -> tuple[np.ndarray, np.ndarray]:
    """Run one genetic search; returns the final population and its fitness, canonically ordered."""
    z = np.asarray(z, dtype=np.float64)
    k = z.size
    pop = z + cfg.mutation_sigma * rng.standard_normal((cfg.population, k))

    def score(p):
        _, labels = _label_latents(p, bb, model)
        return _fitness(p, z, labels, target, same)

    fit = score(pop)
    n_elite = min(cfg.population, max(1, int(round(cfg.elite_fraction * cfg.population))))
    for _ in range(cfg.generations):
        order = _canonical_order(pop, fit)
        elites = pop[order[:n_elite]]
        n_child = cfg.population - n_elite
        n_pairs = (n_child + 1) // 2
        mothers = pop[_tournament(rng, fit, n_pairs, cfg.tournament_size)]
        fathers = pop[_tournament(rng, fit, n_pairs, cfg.tournament_size)]
        cross = rng.random(n_pairs) < cfg.crossover_prob
        swap = (rng.random((n_pairs, k)) < 0.5) & cross[:, None]
        child_a = np.where(swap, fathers, mothers)
        child_b = np.where(swap, mothers, fathers)
        children = np.vstack([child_a, child_b])[:n_child]
        mutate = rng.random(children.shape) < cfg.mutation_prob
        children = children + mutate * (cfg.mutation_sigma * rng.standard_normal(children.shape))
        pop = np.vstack([elites, children])
        fit = score(pop)
    order = _canonical_order(pop, fit)
    return pop[order], fit[order]


def dedupe(latents: np.ndarray, tol: float = SAME_TOL) -> np.ndarray:
    """Indices of the first occurrence of each point (points closer than ``tol`` in max-norm are equal)."""
    keep: list[int] = []
    for i, h in enumerate(latents):
        if keep and np.any(np.max(np.abs(latents[keep] - h), axis=1) < tol):
            continue
        keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def candidates(z, bb, model, cfg: GenConfig, target_label: int | None = None, round_: int = 0) -> np.ndarray:
    """Merged, deduplicated final populations of both searches (threshold independent).

    Round 0 uses the configured seed; later rounds draw fresh, derived streams.
    """
    target = _target(z, bb, model, target_label)
    name = "neighgen.evolve" if round_ == 0 else f"neighgen.evolve.{round_}"
    rng = np.random.default_rng(derive_seed(cfg.seed, name))
    pop_same, fit_same = evolve(z, bb, model, cfg, target, True, rng)
    pop_diff, fit_diff = evolve(z, bb, model, cfg, target, False, rng)
    pool = np.vstack([pop_same, pop_diff])
    return pool[dedupe(pool)]


def gate(model, latents, threshold: float) -> np.ndarray:
    """Keep the latents the discriminator scores at or above ``threshold``."""
    if len(latents) == 0:
        return latents
    mask, _ = aae_mod.disde_batch(model, latents, threshold)
    return latents[mask]


def generate(z, bb, model, cfg: GenConfig, target_label: int | None = None) -> Neighborhood:
    """Build the labelled latent neighborhood H = H_= + H_!= of ``z``.

    ``target_label`` is b(x) for the explained image; when omitted the label
    of the decoded ``z`` stands in. Survivors are split by label and cut to
    ``round(N * balance)`` same-label and the rest different-label points;
    a short side borrows from the other, and further genetic rounds on fresh
    seeds pad the set until ``oversampling * N`` candidates have been drawn.
    """
    z = np.asarray(z, dtype=np.float64)
    target = _target(z, bb, model, target_label)
    pool = gate(model, candidates(z, bb, model, cfg, target), cfg.validity_threshold)
    _, labels = _label_latents(pool, bb, model)

    n_same = int(round(cfg.N * cfg.balance))
    n_diff = cfg.N - n_same
    budget = cfg.oversampling * cfg.N
    drawn, round_ = 0, 0
    while drawn < budget:
        have_same = int(np.sum(labels == target))
        have_diff = len(labels) - have_same
        if have_same >= n_same and have_diff >= n_diff:
            break
        if len(labels) >= cfg.N and have_same and have_diff:
            break
        round_ += 1
        extra = candidates(z, bb, model, cfg, target, round_)
        drawn += max(len(extra), 1)
        extra = gate(model, extra, cfg.validity_threshold)
        if len(extra) == 0:
            continue
        merged = np.vstack([pool, extra])
        keep = dedupe(merged)
        keep = keep[keep >= len(pool)]
        if len(keep) == 0:
            continue
        _, extra_labels = _label_latents(merged[keep], bb, model)
        pool = np.vstack([pool, merged[keep]])
        labels = np.concatenate([labels, extra_labels])

    if len(pool) == 0:
        raise GenerationError(
            "no latent point passed validity gating", stage="neighgen", threshold=cfg.validity_threshold, draws=drawn
        )
    same_idx = np.flatnonzero(labels == target)
    diff_idx = np.flatnonzero(labels != target)
    take_same = min(len(same_idx), max(n_same, cfg.N - len(diff_idx)))
    take_diff = min(len(diff_idx), cfg.N - take_same)
    chosen = np.sort(np.concatenate([same_idx[:take_same], diff_idx[:take_diff]]))
    latents = pool[chosen]
    # relabel from scratch so stored labels always equal b(decode(h))
    decoded, labels = _label_latents(latents, bb, model)
    degenerate = bool(np.all(labels == target) or np.all(labels != target))
    if degenerate:
        log.warning("degenerate neighborhood: %d same-label, %d different-label points",
                    int(np.sum(labels == target)), int(np.sum(labels != target)))
    return Neighborhood(latents, decoded, labels, target, degenerate)
