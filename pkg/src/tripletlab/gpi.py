"""Gaussian-mixture prompt pools: density scoring, top-k retrieval, prefix sources."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .core import DimensionError
from .knowledge import PARTS, EmbeddingTable, KnowledgeBase, sentence_id

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianComponent:
    mu: np.ndarray
    var: float
    pi: float
    attr_id: str

    def __post_init__(self):
        if not self.var >= VAR_FLOOR:
            raise ValueError(f"component {self.attr_id}: var {self.var} below {VAR_FLOOR}")
        if not 0.0 < self.pi <= 1.0:
            raise ValueError(f"component {self.attr_id}: pi {self.pi} outside (0, 1]")


@dataclass(frozen=True)
class PromptPool:
    part: str
    components: tuple[GaussianComponent, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("a prompt pool needs at least one component")
        dims = {c.mu.shape[0] for c in self.components}
        if len(dims) != 1:
            raise DimensionError(f"pool {self.part}: mixed mean dims {sorted(dims)}")
        total = math.fsum(c.pi for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"pool {self.part}: mixing weights sum to {total!r}")

    @property
    def dim(self):
        return self.components[0].mu.shape[0]

    def __len__(self):
        return len(self.components)

    @property
    def means(self):
        return np.stack([c.mu for c in self.components])

    @property
    def variances(self):
        return np.array([c.var for c in self.components])

    @property
    def weights(self):
        return np.array([c.pi for c in self.components])

    @property
    def attr_ids(self):
        return [c.attr_id for c in self.components]


@dataclass(frozen=True)
class Retrieved:
    index: int
    log_term: float
    prompt: np.ndarray


def init_pool(part, embeddings, attr_ids=None) -> PromptPool:
    """Uniform mixing weights, means set to the attribute embeddings, unit variance."""
    if isinstance(embeddings, EmbeddingTable):
        ids = list(embeddings.vectors) if attr_ids is None else list(attr_ids)
        vecs = embeddings.subset(ids)
    else:
        vecs = list(embeddings)
        ids = list(attr_ids) if attr_ids is not None else [f"{part}:{j}" for j in range(len(vecs))]
    if not vecs:
        raise ValueError(f"empty embedding subset for pool {part!r}")
    j = len(vecs)
    comps = tuple(GaussianComponent(np.array(v, dtype=np.float64), 1.0, 1.0 / j, a)
                  for v, a in zip(vecs, ids))
    return PromptPool(part, comps)


def pools_from_kb(kb: KnowledgeBase, table: EmbeddingTable):
    return {part: init_pool(part, table, [sentence_id(part, ph) for ph in kb.union(part)])
            for part in PARTS}


def fit_covariance(pool: PromptPool, attr_to_features) -> PromptPool:
    """Isotropic variance per component from mean squared distance of its features."""
    e = pool.dim
    comps = []
    for c in pool.components:
        feats = attr_to_features.get(c.attr_id)
        if feats is None or len(feats) == 0:
            comps.append(c)
            continue
        x = np.asarray(feats, dtype=np.float64).reshape(len(feats), -1)
        if x.shape[1] != e:
            raise DimensionError(f"feature dim {x.shape[1]} != pool dim {e}")
        msd = float(kernels.sq_dist(x, c.mu[None, :]).sum()) / (x.shape[0] * e)
        comps.append(replace(c, var=max(VAR_FLOOR, msd)))
    return PromptPool(pool.part, tuple(comps))


def component_log_terms(pool: PromptPool, x):
    """(N, J) matrix of log pi_j + log N(x_n | mu_j, var_j I)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    e = pool.dim
    if x.shape[1] != e:
        raise DimensionError(f"feature dim {x.shape[1]} != pool dim {e}")
    var = np.maximum(pool.variances, VAR_FLOOR)
    d2 = kernels.sq_dist(x, pool.means)
    return (np.log(pool.weights) - 0.5 * e * np.log(2.0 * math.pi * var))[None, :] \
        - d2 / (2.0 * var[None, :])


def log_density(pool: PromptPool, x):
    """Per-component log terms and the total log p(x) for one feature vector."""
    terms = component_log_terms(pool, np.asarray(x).reshape(1, -1))[0]
    return terms, float(logsumexp(terms))


def top_k_indices(terms, k):
    """Row-wise indices of the k largest entries; ties go to the lower index."""
    k = min(max(int(k), 0), terms.shape[-1])
    order = np.argsort(-terms, axis=-1, kind="stable")
    return order[..., :k]


def select_top_k(pool: PromptPool, x, k):
    if k < 0:
        raise ValueError("k must be >= 0")
    terms, _ = log_density(pool, x)
    idx = top_k_indices(terms[None, :], k)[0]
    return [Retrieved(int(j), float(terms[j]), pool.components[j].mu) for j in idx]


def _check_pools(pools):
    dims = {p.dim for p in pools.values()}
    if len(dims) != 1:
        raise DimensionError(f"pools disagree on dimension: {sorted(dims)}")


def retrieve_all(pools, x, k):
    """Per-part top-k retrievals in tip, wrist, shaft order."""
    _check_pools(pools)
    return {part: select_top_k(pools[part], x, k) for part in PARTS}


def prefix_source(pools, frames, k, per_frame=False):
    """Selected prompt means for a whole video.

    Returns a (P, E) array with the frame-averaged i-th ranked prompt of each
    sub-pool (tip rows first, then wrist, then shaft), or (L, P, E) with
    ``per_frame``. P is the sum of min(k, J) over the three pools.
    """
    _check_pools(pools)
    frames = np.asarray(frames, dtype=np.float64)
    e = next(iter(pools.values())).dim
    if k == 0:
        shape = (frames.shape[0], 0, e) if per_frame else (0, e)
        return np.zeros(shape)
    blocks = []
    for part in PARTS:
        pool = pools[part]
        idx = top_k_indices(component_log_terms(pool, frames), k)  # (L, k')
        blocks.append(pool.means[idx])  # (L, min(k, J), E)
    out = np.concatenate(blocks, axis=1)
    return out if per_frame else out.mean(axis=0)


def dump_pools(pools, path):
    doc = {part: [{"attr_id": c.attr_id, "pi": c.pi, "var": c.var, "mu": c.mu.tolist()}
                  for c in pool.components] for part, pool in pools.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_pools(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {part: PromptPool(part, tuple(
        GaussianComponent(np.array(c["mu"], dtype=np.float64), float(c["var"]),
                          float(c["pi"]), c["attr_id"]) for c in doc[part]))
        for part in PARTS}
