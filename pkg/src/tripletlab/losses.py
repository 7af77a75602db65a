"""Decomposed BCE, head/medium/tail taxonomy, coordinated gradient masking and baselines.

All loss values are sums over (instance, category) terms; ``dloss_dlogits``
is the per-entry derivative of that sum. Callers that want a mean divide both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

HEAD, MEDIUM, TAIL = "head", "medium", "tail"


@dataclass(frozen=True)
class Taxonomy:
    groups: tuple[str, ...]
    counts: tuple[int, ...]
    head_min: float
    tail_max: float

    @property
    def is_head(self):
        return np.array([g == HEAD for g in self.groups])

    @property
    def is_tail(self):
        return np.array([g == TAIL for g in self.groups])

    @property
    def is_medium(self):
        return np.array([g == MEDIUM for g in self.groups])

    def ratio(self):
        n = len(self.groups)
        return tuple(sum(g == k for g in self.groups) / n for k in (HEAD, MEDIUM, TAIL))


@dataclass(frozen=True)
class CGLConfig:
    gamma: float = 0.1
    membership: str = "any"  # or "majority"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.membership not in ("any", "majority"):
            raise ValueError(f"unknown membership rule {self.membership!r}")


@dataclass
class MaskSample:
    h_plus: np.ndarray
    h_minus: np.ndarray
    instance_is_head: np.ndarray


@dataclass
class LossOutput:
    value: float
    dloss_dlogits: np.ndarray
    diagnostics: dict


def _check_binary(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be binary")
    return labels


def _output(pos, neg, grad, groups=None):
    diag = {"L_pos": float(pos.sum()), "L_neg": float(neg.sum())}
    if groups is not None:
        for name, cols in groups.items():
            diag[f"{name}_L_pos"] = float(pos[:, cols].sum())
            diag[f"{name}_L_neg"] = float(neg[:, cols].sum())
    return LossOutput(float(pos.sum() + neg.sum()), grad, diag)


def _groups(taxonomy):
    if taxonomy is None:
        return None
    return {HEAD: taxonomy.is_head, MEDIUM: taxonomy.is_medium, TAIL: taxonomy.is_tail}


def decompose_bce(logits, labels, taxonomy=None) -> LossOutput:
    z = np.asarray(logits, dtype=np.float64)
    y = _check_binary(labels)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} vs labels {y.shape}")
    ones = np.ones_like(z)
    pos, neg, grad = kernels.masked_bce(z, y, ones, ones)
    return _output(pos, neg, grad, _groups(taxonomy))


def bce_logit_grad(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    return kernels.sigmoid(z) - _check_binary(labels)


def build_taxonomy(counts, head_min=10_000, tail_max=1_000) -> Taxonomy:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("counts must be non-negative")
    if head_min <= tail_max:
        raise ValueError(f"head_min ({head_min}) must exceed tail_max ({tail_max})")
    groups = tuple(HEAD if c > head_min else TAIL if c < tail_max else MEDIUM for c in counts)
    return Taxonomy(groups, tuple(counts), head_min, tail_max)


def scaled_thresholds(counts, head_frac=0.25, tail_frac=0.025):
    """Thresholds proportional to the largest class count.

    The fractions match the 10,000 / 1,000 cut points relative to a
    ~40,000-sample largest class.
    """
    top = max(counts)
    return head_frac * top, tail_frac * top


def instance_head_membership(labels_row, taxonomy: Taxonomy, rule="any") -> bool:
    y = np.asarray(labels_row) > 0
    n_head = int(np.sum(y & taxonomy.is_head))
    if rule == "any":
        return n_head > 0
    if rule == "majority":
        return n_head > 0 and 2 * n_head > int(y.sum())
    raise ValueError(f"unknown membership rule {rule!r}")


def head_instances(labels, taxonomy: Taxonomy, rule="any"):
    return np.array([instance_head_membership(row, taxonomy, rule) for row in labels], dtype=bool)


def sample_masks(labels, taxonomy: Taxonomy, cfg: CGLConfig, rng) -> MaskSample:
    """Draw one Bernoulli(gamma) lambda per (instance, category) and build h+/h-."""
    labels = np.asarray(labels)
    n, g = labels.shape
    lam = rng.random((n, g)) < cfg.gamma
    inst_head = head_instances(labels, taxonomy, cfg.membership)
    e_mask = np.broadcast_to(taxonomy.is_head[None, :], (n, g))
    f_mask = inst_head[:, None] & taxonomy.is_tail[None, :]
    h_plus = 1.0 - (lam & e_mask)
    h_minus = 1.0 - (lam & f_mask)
    return MaskSample(h_plus.astype(np.float64), h_minus.astype(np.float64), inst_head)


def cgl_loss(logits, labels, masks: MaskSample, taxonomy=None) -> LossOutput:
    z = np.asarray(logits, dtype=np.float64)
    y = _check_binary(labels)
    if z.shape != y.shape or masks.h_plus.shape != z.shape or masks.h_minus.shape != z.shape:
        raise ValueError("logits, labels and masks must share one shape")
    pos, neg, grad = kernels.masked_bce(z, y, masks.h_plus, masks.h_minus)
    return _output(pos, neg, grad, _groups(taxonomy))


def expected_cgl_loss(logits, labels, taxonomy: Taxonomy, gamma, membership="any"):
    """Closed-form mean of cgl_loss over mask draws: maskable terms weighted by 1-gamma."""
    y = _check_binary(labels)
    inst_head = head_instances(y, taxonomy, membership)
    n, g = y.shape
    hp = np.where(np.broadcast_to(taxonomy.is_head, (n, g)), 1.0 - gamma, 1.0)
    hm = np.where(inst_head[:, None] & taxonomy.is_tail[None, :], 1.0 - gamma, 1.0)
    pos, neg, _ = kernels.masked_bce(np.asarray(logits, dtype=np.float64), y, hp, hm)
    return float(pos.sum() + neg.sum())


def focal_loss(logits, labels, focusing=2.0):
    if focusing < 0:
        raise ValueError("focusing parameter must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    y = _check_binary(labels)
    p = kernels.sigmoid(z)
    q = kernels.sigmoid(-z)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    pos = -y * q ** focusing * log_p
    neg = -(1.0 - y) * p ** focusing * log_q
    grad = y * (focusing * p * q ** focusing * log_p - q ** (focusing + 1.0)) \
        + (1.0 - y) * (-focusing * q * p ** focusing * log_q + p ** (focusing + 1.0))
    return pos, neg, grad


def eq_weights(labels, taxonomy: Taxonomy, suppress_prob, rng):
    """Negative-term weights that drop tail-category negatives with probability ``suppress_prob``."""
    if not 0.0 <= suppress_prob <= 1.0:
        raise ValueError("suppression probability must lie in [0, 1]")
    n, g = np.asarray(labels).shape
    beta = rng.random((n, g)) < suppress_prob
    return 1.0 - (beta & taxonomy.is_tail[None, :]).astype(np.float64)


def baseline_losses(kind, logits, labels, params=None, taxonomy=None) -> LossOutput:
    """Focal loss (``params['focusing']``) or sigmoid equalization loss.

    For ``eq`` either pass ``params['neg_weight']`` (a fixed weight matrix) or
    ``params['suppress_prob']`` with ``params['rng']`` and a taxonomy.
    """
    params = params or {}
    if kind == "focal":
        pos, neg, grad = focal_loss(logits, labels, params.get("focusing", 2.0))
        return _output(pos, neg, grad, _groups(taxonomy))
    if kind == "eq":
        z = np.asarray(logits, dtype=np.float64)
        y = _check_binary(labels)
        w = params.get("neg_weight")
        if w is None:
            if taxonomy is None:
                raise ValueError("eq loss needs a taxonomy")
            w = eq_weights(y, taxonomy, params.get("suppress_prob", 0.0),
                           params.get("rng", np.random.default_rng(0)))
        pos, neg, grad = kernels.masked_bce(z, y, np.ones_like(z), w)
        return _output(pos, neg, grad, _groups(taxonomy))
    raise ValueError(f"unknown baseline loss {kind!r}")
