"""Average precision for component, association and triplet predictions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import LabelSpace

AP_KEYS = ("AP_I", "AP_V", "AP_T", "AP_IV", "AP_IT", "AP_IVT")


@dataclass
class APSlice:
    per_class: np.ndarray  # NaN where a class has no positives or is excluded
    mean: float
    excluded: list = field(default_factory=list)
    empty: bool = False


def average_precision(scores, labels, valid=None) -> APSlice:
    """Per-class AP with descending-score, ascending-frame tie-break.

    Classes without positives (or with ``valid[c]`` False) are excluded from
    the mean and listed in ``excluded``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    ap = kernels.average_precision(scores, labels)
    if valid is not None:
        ap = np.where(np.asarray(valid, dtype=bool), ap, np.nan)
    excluded = [int(c) for c in np.flatnonzero(np.isnan(ap))]
    ok = ~np.isnan(ap)
    if not ok.any():
        warnings.warn("no class has a positive label; AP is undefined", RuntimeWarning)
        return APSlice(ap, float("nan"), excluded, empty=True)
    return APSlice(ap, float(ap[ok].mean()), excluded)


def project_predictions(triplet_scores, space: LabelSpace):
    """Max-project triplet scores onto components and instrument pairs.

    Returns a dict of score matrices and, for the pair keys, a validity mask
    marking pairs covered by at least one valid triplet.
    """
    s = np.asarray(triplet_scores, dtype=np.float64)
    out = {}
    for task in ("I", "V", "T"):
        out[task] = kernels.max_project(s, space.component(task), space.sizes[task])
    for kind, n in (("IV", space.n_instruments * space.n_verbs),
                    ("IT", space.n_instruments * space.n_targets)):
        idx = space.pair_index(kind)
        out[kind] = kernels.max_project(s, idx, n)
        valid = np.zeros(n, dtype=bool)
        valid[idx] = True
        out[kind + "_valid"] = valid
    out["IVT"] = s
    return out


def project_labels_pairs(y_ivt, space: LabelSpace):
    y = np.asarray(y_ivt, dtype=np.float64)
    comp = project_predictions(y, space)
    return {k: (v > 0).astype(np.uint8) for k, v in comp.items() if not k.endswith("_valid")}


def ap_report(triplet_scores, y_ivt, space: LabelSpace, component_scores=None):
    """All six AP figures from pooled frames.

    ``component_scores`` may supply dedicated I/V/T scores; otherwise they are
    projected from the triplet scores.
    """
    proj = project_predictions(triplet_scores, space)
    labs = project_labels_pairs(y_ivt, space)
    report, per_class, excluded = {}, {}, {}
    for key in ("I", "V", "T", "IV", "IT", "IVT"):
        scores = proj[key]
        if component_scores is not None and key in component_scores:
            scores = component_scores[key]
        valid = proj.get(key + "_valid")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sl = average_precision(scores, labs[key], valid)
        report["AP_" + key] = sl.mean
        per_class["AP_" + key] = sl.per_class
        excluded["AP_" + key] = sl.excluded
    return report, per_class, excluded


def group_mean_ap(per_class_ivt, mask):
    vals = np.asarray(per_class_ivt)[np.asarray(mask, dtype=bool)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")
