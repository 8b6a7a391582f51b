"""End-to-end explanation of one black-box decision.

encode -> latent neighborhood -> surrogate tree -> decision rule and
counterfactual rules -> exemplars / counter-exemplars -> saliency map.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import aae as aae_mod
from . import imgio, neighgen, surrogate
from .errors import GenerationError, LatexplainError
from .evaluation import fidelity
from .seeding import derive_seed
from .surrogate import CounterfactualRule, DecisionRule, SplitCondition

log = logging.getLogger(__name__)

PRIOR_SPAN = 3.0  # unbounded box sides stop at mean +- 3 sd of the N(0, I) prior
ESSENTIAL_BAND = 0.05


@dataclass
class ExplainConfig:
    gen: neighgen.GenConfig = field(default_factory=neighgen.GenConfig)
    tree: surrogate.TreeConfig = field(default_factory=surrogate.TreeConfig)
    n_exemplars: int = 10
    n_counter: int = 2
    budget: int = 20000
    batch: int = 500
    attempts: int = 3  # fresh neighborhoods tried when the tree disagrees at z or sampling fails
    seed: int = 0

    def __post_init__(self):
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


@dataclass
class Samples:
    """Accepted latent draws with their decoded images and black-box labels."""

    latents: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    rule_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls, k: int, n: int) -> "Samples":
        return cls(np.zeros((0, k)), np.zeros((0, n)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass
class Explanation:
    source: np.ndarray
    source_label: int
    latent: np.ndarray
    exemplars: Samples
    counter_exemplars: Samples
    saliency: np.ndarray
    rule: DecisionRule
    counterfactuals: list[CounterfactualRule]
    fidelity: float
    tree: surrogate.DecisionTree
    neighborhood_size: int = 0
    warnings: list[str] = field(default_factory=list)


def sampling_box(premise, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Finite box for uniform sampling: the premise's bounds, open sides cut at +-3."""
    lo, hi = surrogate.feasible_box(premise, k)
    if not np.all(lo < hi):
        raise ValueError("premise is unsatisfiable: " + ", ".join(map(str, premise)))
    lo_f = np.where(np.isfinite(lo), lo, np.minimum(-PRIOR_SPAN, hi - 1.0))
    hi_f = np.where(np.isfinite(hi), hi, np.maximum(PRIOR_SPAN, lo + 1.0))
    return lo_f, hi_f


def _sample_rule(premise, label, model, bb, count, budget, batch, rng, threshold):
    k = model.k
    lo, hi = sampling_box(premise, k)
    kept_z, kept_x, kept_y = [], [], []
    stats = {"drawn": 0, "in_premise": 0, "valid": 0, "label_ok": 0}
    while stats["drawn"] < budget and sum(map(len, kept_y)) < count:
        m = min(batch, budget - stats["drawn"])
        stats["drawn"] += m
        cand = lo + (hi - lo) * rng.random((m, k))
        cand = cand[surrogate.satisfies_batch(premise, cand)]
        stats["in_premise"] += len(cand)
        if not len(cand):
            continue
        ok, _ = aae_mod.disde_batch(model, cand, threshold)
        cand = cand[ok]
        stats["valid"] += len(cand)
        if not len(cand):
            continue
        # label exactly the 8-bit image that gets emitted
        images = imgio.quantize(aae_mod.decode(model, cand))
        labels = np.asarray(bb.classify(images), dtype=np.int64)
        hit = labels == label
        stats["label_ok"] += int(hit.sum())
        kept_z.append(cand[hit])
        kept_x.append(images[hit])
        kept_y.append(labels[hit])
    if kept_y:
        z, x, y = (np.concatenate(a)[:count] for a in (kept_z, kept_x, kept_y))
    else:
        z, x, y = np.zeros((0, k)), np.zeros((0, model.n)), np.zeros(0, dtype=np.int64)
    return Samples(z, x, y), stats


def generate_exemplars(rule: DecisionRule, model, bb, count: int = 10, budget: int = 5000, seed: int = 0,
                       label: int | None = None, threshold: float | None = None, batch: int = 500) -> Samples:
    """Latent draws inside the rule's box that pass disde and keep the black-box label.

    ``label`` defaults to the rule's consequent.
    """
    if not surrogate.is_satisfiable(rule.premise, model.k):
        raise ValueError("premise is unsatisfiable: " + ", ".join(map(str, rule.premise)))
    label = rule.label if label is None else label
    rng = np.random.default_rng(derive_seed(seed, "explain.exemplars"))
    out, stats = _sample_rule(rule.premise, label, model, bb, count, budget, batch, rng, threshold)
    if len(out) == 0:
        raise GenerationError("no exemplar survived the filters", stage="exemplars", **_rates(stats))
    out.rule_index = np.zeros(len(out), dtype=np.int64)
    return out


def generate_counter_exemplars(counterfactuals, model, bb, count_per_rule: int = 2, budget: int = 5000,
                               seed: int = 0, total: int | None = None, threshold: float | None = None,
                               batch: int = 500) -> Samples:
    """Counter-exemplars for each counterfactual rule, interleaved rule by rule.

    Each kept image is labelled by the black box with that rule's label.
    ``total`` caps the combined count.
    """
    if not counterfactuals:
        raise ValueError("need at least one counterfactual rule")
    per_rule, diagnostics = [], []
    for i, cf in enumerate(counterfactuals):
        rng = np.random.default_rng(derive_seed(seed, f"explain.counter.{i}"))
        got, stats = _sample_rule(cf.premise, cf.label, model, bb, count_per_rule, budget, batch, rng, threshold)
        per_rule.append(got)
        diagnostics.append({"rule": i, "label": cf.label, **_rates(stats)})
    if all(len(s) == 0 for s in per_rule):
        raise GenerationError("every counterfactual rule exhausted its budget", stage="counter_exemplars",
                              rules=diagnostics)
    order = [(j, i) for j in range(count_per_rule) for i, s in enumerate(per_rule) if j < len(s)]
    if total is not None:
        order = order[:total]
    return Samples(
        np.array([per_rule[i].latents[j] for j, i in order]),
        np.array([per_rule[i].images[j] for j, i in order]),
        np.array([per_rule[i].labels[j] for j, i in order], dtype=np.int64),
        np.array([i for _, i in order], dtype=np.int64),
    )


def _rates(stats: dict) -> dict:
    drawn = max(stats["drawn"], 1)
    return {
        **stats,
        "premise_rate": stats["in_premise"] / drawn,
        "validity_rate": stats["valid"] / max(stats["in_premise"], 1),
        "label_rate": stats["label_ok"] / max(stats["valid"], 1),
    }


def saliency_map(x, exemplars) -> np.ndarray:
    """Per-pixel median of ``x - exemplar`` (mean of the two middle values for even counts)."""
    x = np.asarray(x, dtype=np.float64)
    ex = np.asarray(exemplars, dtype=np.float64)
    if ex.ndim != 2 or len(ex) == 0:
        raise ValueError("saliency needs at least one exemplar")
    if ex.shape[1] != x.size:
        raise ValueError(f"exemplars have {ex.shape[1]} pixels, image has {x.size}")
    diffs = np.sort(x[None, :] - ex, axis=0)
    m = len(ex)
    if m % 2:
        return diffs[m // 2].copy()
    return (diffs[m // 2 - 1] + diffs[m // 2]) / 2.0


def saliency_bands(s, band: float = ESSENTIAL_BAND) -> np.ndarray:
    """-1 / 0 / +1 per pixel: darker-than-exemplars, essential (|s| < band), brighter."""
    s = np.asarray(s)
    return np.where(np.abs(s) < band, 0, np.sign(s)).astype(np.int8)


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if isinstance(exc, LatexplainError) and exc.stage is None:
            exc.stage = self.name
        return False


def explain(x, bb, model, cfg: ExplainConfig | None = None) -> Explanation:
    """Explain ``bb``'s label for image ``x`` with rules, (counter-)exemplars and a saliency map."""
    cfg = cfg or ExplainConfig()
    x = np.asarray(x, dtype=np.float64)
    warnings: list[str] = []
    with _Stage("encode"):
        source_label = bb.classify_one(x)
        z = aae_mod.encode(model, x, mode="mean")
    threshold = cfg.gen.validity_threshold
    for attempt in range(cfg.attempts):
        last = attempt == cfg.attempts - 1
        gen_cfg, ex_seed = cfg.gen, cfg.seed
        if attempt:
            gen_cfg = replace(cfg.gen, seed=derive_seed(cfg.gen.seed, f"attempt.{attempt}"))
            ex_seed = derive_seed(cfg.seed, f"attempt.{attempt}")
        with _Stage("neighgen"):
            hood = neighgen.generate(z, bb, model, gen_cfg, target_label=source_label)
        with _Stage("surrogate"):
            tree = surrogate.fit_tree(hood.latents, hood.labels, cfg.tree, num_classes=bb.num_classes)
            rule = surrogate.extract_rule(tree, z)
            cfs = surrogate.extract_counterfactuals(tree, z, rule)
        if rule.label != source_label and not last:
            log.debug("attempt %d: tree predicts %d at z, black box %d", attempt, rule.label, source_label)
            continue
        try:
            with _Stage("exemplars"):
                ex = generate_exemplars(rule, model, bb, cfg.n_exemplars, cfg.budget, ex_seed,
                                        label=source_label, threshold=threshold, batch=cfg.batch)
        except GenerationError:
            if last:
                raise
            log.debug("attempt %d: exemplar sampling exhausted its budget", attempt)
            continue
        break
    if attempt:
        warnings.append(f"retried_neighborhood:{attempt}")
    if hood.degenerate:
        warnings.append("degenerate_neighborhood")
    if rule.label != source_label:
        warnings.append("tree_disagrees_at_z")
    usable = [c for c in cfs if c.label != source_label]
    if usable:
        with _Stage("counter_exemplars"):
            cex = generate_counter_exemplars(usable, model, bb, cfg.n_counter, cfg.budget, cfg.seed,
                                             total=cfg.n_counter, threshold=threshold, batch=cfg.batch)
    else:
        cex = Samples.empty(model.k, model.n)
        warnings.append("no_counterfactuals")
    with _Stage("saliency"):
        s = saliency_map(x, ex.images)
    return Explanation(
        source=x, source_label=source_label, latent=z, exemplars=ex, counter_exemplars=cex,
        saliency=s, rule=rule, counterfactuals=cfs, fidelity=fidelity(hood, tree), tree=tree,
        neighborhood_size=len(hood), warnings=warnings,
    )


# -- interpolation ---------------------------------------------------------------


@dataclass
class InterpolationStep:
    latent: np.ndarray
    image: np.ndarray
    label: int
    satisfies: bool


@dataclass
class InterpolationSequence:
    steps: list[InterpolationStep]
    endpoints: tuple[np.ndarray, np.ndarray]

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.steps]


def interpolate(z, h_c, constraint: DecisionRule | None, steps: int, model, bb) -> InterpolationSequence:
    """Decode points on the segment z -> h_c at t = i / (steps - 1).

    Steps are tagged, not dropped, when they leave the constraint's region.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    z = np.asarray(z, dtype=np.float64)
    h_c = np.asarray(h_c, dtype=np.float64)
    t = np.arange(steps, dtype=np.float64) / (steps - 1)
    latents = z + t[:, None] * (h_c - z)
    latents[0], latents[-1] = z, h_c
    images = imgio.quantize(aae_mod.decode(model, latents))
    labels = bb.classify(images)
    ok = constraint.holds_batch(latents) if constraint is not None else np.ones(steps, dtype=bool)
    return InterpolationSequence(
        [InterpolationStep(latents[i], images[i], int(labels[i]), bool(ok[i])) for i in range(steps)],
        (z, h_c),
    )


def label_blocks(labels) -> list[int]:
    """Labels with consecutive repeats collapsed, e.g. [4, 4, 9, 9] -> [4, 9]."""
    out: list[int] = []
    for lab in labels:
        if not out or out[-1] != lab:
            out.append(int(lab))
    return out


# -- manifest ---------------------------------------------------------------------


def _cond_from_json(d) -> SplitCondition:
    return SplitCondition(int(d["feature"]), d["op"], float(d["threshold"]))


def rule_from_json(d) -> DecisionRule:
    premise = [_cond_from_json(c) for c in d["premise"]]
    if "falsified_count" in d:
        return CounterfactualRule(premise, int(d["label"]), int(d["falsified_count"]))
    return DecisionRule(premise, int(d["label"]))


def manifest(expl: Explanation, source_file: str, exemplar_files, counter_files, saliency_file: str) -> dict:
    return {
        "source": source_file,
        "source_label": int(expl.source_label),
        "latent": [float(v) for v in expl.latent],
        "rule": expl.rule.to_json(),
        "counterfactuals": [c.to_json() for c in expl.counterfactuals],
        "exemplars": [
            {"file": f, "label": int(lab), "latent": [float(v) for v in z]}
            for f, lab, z in zip(exemplar_files, expl.exemplars.labels, expl.exemplars.latents)
        ],
        "counter_exemplars": [
            {"file": f, "label": int(lab), "rule": int(r), "latent": [float(v) for v in z]}
            for f, lab, r, z in zip(counter_files, expl.counter_exemplars.labels,
                                    expl.counter_exemplars.rule_index, expl.counter_exemplars.latents)
        ],
        "saliency_file": saliency_file,
        "saliency": [float(v) for v in expl.saliency],
        "fidelity": float(expl.fidelity),
        "neighborhood_size": int(expl.neighborhood_size),
        "warnings": list(expl.warnings),
        "tree": expl.tree.to_json(),
    }


def dumps_manifest(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads_manifest(text: str) -> dict:
    return json.loads(text)
