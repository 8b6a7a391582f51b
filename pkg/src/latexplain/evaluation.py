"""Quantitative checks of explanations: fidelity, 1-NN exemplars, relevance, robustness.

Robustness neighborhoods use the root-mean-square pixel distance
``||a - b||_2 / sqrt(n)`` on the [0, 1] intensity scale when testing
``<= epsilon``; the Lipschitz ratio itself uses plain L2 norms.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import LatexplainError
from .seeding import derive_seed
from .surrogate import predict_batch

MASK_COLORS = {"black": 0, "gray": 127, "white": 255}


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("LATEXPLAIN_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    items = list(items)
    workers = min(max_workers(), max(len(items), 1))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# -- fidelity -------------------------------------------------------------------


def fidelity(neighborhood, tree) -> float:
    """Share of neighborhood points where the tree agrees with the stored black-box label."""
    if len(neighborhood.labels) == 0:
        raise ValueError("fidelity of an empty neighborhood is undefined")
    return float(np.mean(predict_batch(tree, neighborhood.latents) == np.asarray(neighborhood.labels)))


# -- nearest exemplar classifier ----------------------------------------------------


def one_nn_predict(ref_images, ref_labels, queries) -> np.ndarray:
    ref = np.asarray(ref_images, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("1-NN needs a non-empty reference set")
    q = np.asarray(queries, dtype=np.float64)
    d2 = (q * q).sum(1)[:, None] - 2.0 * q @ ref.T + (ref * ref).sum(1)[None, :]
    # argmin keeps the lowest reference index on ties
    return np.asarray(ref_labels)[np.argmin(d2, axis=1)]


def knn_exemplar_accuracy(ref_images, ref_labels, test_images, test_labels) -> float:
    test_labels = np.asarray(test_labels)
    if len(test_labels) == 0:
        raise ValueError("empty test set")
    return float(np.mean(one_nn_predict(ref_images, ref_labels, test_images) == test_labels))


def exemplar_reference(explanations, n: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``n`` exemplars and ``n`` counter-exemplars of each explanation, with black-box labels."""
    imgs, labs = [], []
    for e in explanations:
        imgs.extend(e.exemplars.images[:n])
        labs.extend(e.exemplars.labels[:n])
        imgs.extend(e.counter_exemplars.images[:n])
        labs.extend(e.counter_exemplars.labels[:n])
    if not imgs:
        raise ValueError("explanations carry no exemplars")
    return np.asarray(imgs), np.asarray(labs, dtype=np.int64)


# -- relevance ----------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    tau: float
    color: int  # 0, 127 or 255

    def __post_init__(self):
        if not 0.0 <= self.tau <= 100.0:
            raise ValueError("tau must lie in [0, 100]")
        if self.color not in MASK_COLORS.values():
            raise ValueError("color must be 0, 127 or 255")


def mask_image(x, s, spec: MaskSpec) -> np.ndarray:
    """Paint pixels whose saliency is below the tau-th percentile (linear interpolation)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != x.shape:
        raise ValueError("saliency and image sizes differ")
    cut = np.percentile(s, spec.tau)
    out = x.copy()
    out[s < cut] = spec.color / 255.0
    return out


def relevance(images, saliencies, spec: MaskSpec, bb) -> float:
    """Fraction of images whose black-box label survives masking."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0 or len(images) != len(saliencies):
        raise ValueError("need one saliency map per image, and at least one image")
    masked = np.array([mask_image(x, s, spec) for x, s in zip(images, saliencies)])
    return float(np.mean(bb.classify(images) == bb.classify(masked)))


def relevance_curve(images, saliencies, bb, taus=range(0, 101, 10), colors=("black", "gray", "white")):
    rows = []
    for color in colors:
        for tau in taus:
            rows.append({"color": color, "tau": tau,
                         "relevance": relevance(images, saliencies, MaskSpec(tau, MASK_COLORS[color]), bb)})
    return rows


# -- robustness ---------------------------------------------------------------------


def rms_distance(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(d) / math.sqrt(d.size))


def local_lipschitz(x, s, neighbors) -> float | None:
    """max ||s_i - s|| / ||x_i - x|| over ``neighbors`` = [(x_i, s_i), ...]; None if there are none."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    best = None
    for xi, si in neighbors:
        dx = np.linalg.norm(np.asarray(xi, dtype=np.float64) - x)
        if dx == 0:
            raise ValueError("a neighbor coincides with the instance")
        r = float(np.linalg.norm(np.asarray(si, dtype=np.float64) - s) / dx)
        best = r if best is None else max(best, r)
    return best


def salt_pepper(x, rate: float, seed: int) -> np.ndarray:
    """Set a random floor(rate * n) pixels to 0 or 1 with equal probability."""
    if not 0.0 < rate < 1.0:
        raise ValueError("rate must lie in (0, 1)")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    count = int(math.floor(rate * x.size))
    out = x.copy()
    idx = rng.choice(x.size, size=count, replace=False)
    out[idx] = rng.integers(0, 2, size=count).astype(np.float64)
    return out


@dataclass
class RobustnessConfig:
    epsilon: float = 0.1
    noise_rate: float = 0.01
    replicas: int = 5
    max_tries: int = 20
    max_neighbors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in (0, 1)")


@dataclass
class RobustnessReport:
    values: list  # one float or None per instance
    neighbors: list[int] = field(default_factory=list)

    @property
    def covered(self) -> list[float]:
        return [v for v in self.values if v is not None]

    @property
    def coverage(self) -> float:
        return len(self.covered) / len(self.values) if self.values else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.covered)) if self.covered else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.covered)) if self.covered else float("nan")

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "coverage": self.coverage,
                "instances": len(self.values), "covered": len(self.covered)}


ExplainFn = Callable[[np.ndarray], np.ndarray]


def _lipschitz_with(explain_fn: ExplainFn, x, neighbors) -> tuple[float | None, int]:
    """Lipschitz ratio over neighbors whose explanation succeeds.

    An instance whose own explanation fails, or with no surviving neighbor,
    is uncovered (None).
    """
    try:
        s = explain_fn(x)
    except LatexplainError:
        return None, 0
    pairs = []
    for xi in neighbors:
        try:
            pairs.append((xi, explain_fn(xi)))
        except LatexplainError:
            continue
    if not pairs:
        return None, 0
    return local_lipschitz(x, s, pairs), len(pairs)


def coherence(images, explain_fn: ExplainFn, pool, bb, cfg: RobustnessConfig) -> RobustnessReport:
    """Lipschitz ratio against real pool images within epsilon that share the black-box label."""
    images = np.asarray(images, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    pool_labels = bb.classify(pool)
    labels = bb.classify(images)
    n = images.shape[1]
    d = np.sqrt(np.maximum(
        (images**2).sum(1)[:, None] - 2 * images @ pool.T + (pool**2).sum(1)[None, :], 0.0) / n)

    def one(i):
        ok = (d[i] <= cfg.epsilon) & (pool_labels == labels[i])
        ok &= np.any(pool != images[i], axis=1)
        idx = np.flatnonzero(ok)
        idx = idx[np.argsort(d[i, idx], kind="stable")][: cfg.max_neighbors]
        return _lipschitz_with(explain_fn, images[i], [pool[j] for j in idx])

    out = parallel_map(one, range(len(images)))
    return RobustnessReport([v for v, _ in out], [c for _, c in out])


def noisy_neighbors(x, bb, cfg: RobustnessConfig, seed: int) -> list[np.ndarray]:
    """Up to ``replicas`` salt-and-pepper copies keeping b(x), each within epsilon.

    A copy that fails is redrawn with a fresh seed, at most ``max_tries`` times.
    """
    label = bb.classify_one(x)
    out = []
    for r in range(cfg.replicas):
        for t in range(cfg.max_tries):
            cand = salt_pepper(x, cfg.noise_rate, derive_seed(seed, f"stability.{r}.{t}"))
            dist = rms_distance(cand, x)
            if 0 < dist <= cfg.epsilon and bb.classify_one(cand) == label:
                out.append(cand)
                break
    return out


def stability(images, explain_fn: ExplainFn, bb, cfg: RobustnessConfig) -> RobustnessReport:
    images = np.asarray(images, dtype=np.float64)

    def one(i):
        nb = noisy_neighbors(images[i], bb, cfg, derive_seed(cfg.seed, f"instance.{i}"))
        return _lipschitz_with(explain_fn, images[i], nb)

    out = parallel_map(one, range(len(images)))
    return RobustnessReport([v for v, _ in out], [c for _, c in out])


def random_saliency_explainer(seed: int = 0) -> ExplainFn:
    """Sanity baseline: uniform noise in [-1, 1] seeded by the image bytes."""

    def fn(x):
        x = np.asarray(x, dtype=np.float64)
        h = derive_seed(seed, x.tobytes().hex())
        return np.random.default_rng(h).uniform(-1.0, 1.0, size=x.size)

    return fn


# -- reports ------------------------------------------------------------------------


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({c: _fmt(row.get(c)) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def summary_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"
