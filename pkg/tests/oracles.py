"""Brute-force reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np

from poisontrace.baselines import FiniteERM
from poisontrace.core import Sample
from poisontrace.trainer import ModelParams, init_params


def sample_loss(params: ModelParams, x, y) -> float:
    logits = params.logits(np.asarray(x)[None, :])[0]
    top = logits.max()
    return float(top + math.log(np.exp(logits - top).sum()) - logits[y])


def fd_gradient(params: ModelParams, sample: Sample, layers: int = 1, h: float = 1e-4):
    """Central differences over the first ``p`` flattened parameters."""
    flat = params.flatten()
    shapes = params.shapes()
    p = sum(r * c for r, c in shapes[:layers])
    out = np.empty(p)
    for j in range(p):
        up, down = flat.copy(), flat.copy()
        up[j] += h
        down[j] -= h
        out[j] = (sample_loss(ModelParams.unflatten(up, shapes), sample.x, sample.y)
                  - sample_loss(ModelParams.unflatten(down, shapes), sample.x, sample.y)) / (2 * h)
    return out


def random_case(rng: np.random.Generator):
    """Random model, sample and gradient-layer count."""
    d = int(rng.integers(2, 6))
    C = int(rng.integers(2, 5))
    hidden = int(rng.choice([0, 3, 5]))
    params = init_params(d, C, hidden, rng)
    for w in params.layers():
        w += 0.3 * rng.standard_normal(w.shape)
    layers = 2 if hidden and rng.random() < 0.5 else 1
    return params, Sample(rng.standard_normal(d), int(rng.integers(C))), layers


def relative_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


# -- scoring oracles, written as explicit loops ---------------------------

def cosine(u, v, eps: float = 1e-12) -> float:
    nu = max(math.sqrt(sum(a * a for a in u)), eps)
    nv = max(math.sqrt(sum(b * b for b in v)), eps)
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def gas_loop(train, event, rates) -> float:
    return sum(rates[t] * cosine(train[t], event[t]) for t in range(len(rates)))


def mean_loop(owner, event, rates) -> float:
    n = owner.shape[1]
    return sum(gas_loop(owner[:, j], event, rates) for j in range(n)) / n


def pooled_loop(owner, event, rates) -> float:
    pooled = [[sum(owner[t, j, i] for j in range(owner.shape[1])) for i in range(owner.shape[2])]
              for t in range(owner.shape[0])]
    return gas_loop(pooled, event, rates)


def heuristic_loop(owner, event, rates) -> list:
    return [sum(rates[t] * sum(a * b for a, b in zip(owner[t, j], event[t]))
                for t in range(len(rates))) for j in range(owner.shape[1])]


def topk_loop(values, k) -> float:
    ordered = sorted(values, reverse=True)[:k]
    return sum(ordered) / len(ordered)


def owner_scores_loop(sketches, event, rates, index_sets, k) -> list:
    per = [gas_loop(sketches[:, j], event, rates) for j in range(sketches.shape[1])]
    return [topk_loop([per[j] for j in idx], k) for idx in index_sets]


def random_scoring_instance(rng: np.random.Generator, n: int = None):
    T = int(rng.integers(1, 6))
    r = int(rng.integers(1, 9))
    n = int(rng.integers(1, 25)) if n is None else n
    sketches = rng.standard_normal((T, n, r)) * rng.uniform(0.1, 10, size=(1, n, 1))
    event = rng.standard_normal((T, r))
    rates = rng.uniform(0.01, 1.0, size=T)
    return sketches, event, rates


def random_discrete_mixture(rng, components=3, points=4, C=3):
    """Finite feature space: per-component point masses and label tables."""
    weights = rng.dirichlet(np.ones(components))
    densities = rng.dirichlet(np.ones(points), size=components)
    posteriors = rng.dirichlet(np.ones(C), size=(components, points))
    return weights, densities, posteriors


def sample_posterior(rng, weights, densities, posteriors, x0, draws):
    """Monte-Carlo estimate of P(y | x = x0) and its standard errors."""
    comp = rng.choice(weights.size, size=draws, p=weights)
    u = rng.random(draws)
    x = (u[:, None] > np.cumsum(densities[comp], axis=1)).sum(axis=1)
    at = comp[x == x0]
    v = rng.random(at.size)
    y = (v[:, None] > np.cumsum(posteriors[at, x0], axis=1)).sum(axis=1)
    C = posteriors.shape[-1]
    p = np.bincount(y, minlength=C) / at.size
    return p, np.sqrt(np.maximum(p * (1 - p), 1e-12) / at.size)


def random_erm_with_shared_minimiser(rng):
    n = int(rng.integers(1, 12))
    lc = rng.integers(0, 6, n).astype(float)
    lp = rng.integers(0, 6, n).astype(float)
    j = int(rng.integers(n))
    lc[j], lp[j] = lc.min(), lp.min()
    return FiniteERM(lc, lp)
