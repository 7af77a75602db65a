"""Per-iteration head/tail probability and gradient statistics."""
from __future__ import annotations

import csv
import io
import json

import numpy as np

from . import kernels
from .losses import Taxonomy

HEADER = ("iter", "group", "sign", "mean_prob", "mean_abs_grad")
CELLS = (("head", "positive"), ("head", "negative"), ("tail", "positive"), ("tail", "negative"))


def trace_cells(iteration, logits, labels, grad, taxonomy: Taxonomy):
    """Four rows for one iteration; an empty cell carries None values."""
    p = kernels.sigmoid(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels) > 0
    g = np.abs(np.asarray(grad))
    cols = {"head": taxonomy.is_head[None, :], "tail": taxonomy.is_tail[None, :]}
    rows = []
    for group, sign in CELLS:
        sel = cols[group] & (y if sign == "positive" else ~y)
        if not sel.any():
            rows.append((iteration, group, sign, None, None))
        else:
            rows.append((iteration, group, sign, float(p[sel].mean()), float(g[sel].mean())))
    return rows


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    order = {c: i for i, c in enumerate(CELLS)}
    for it, group, sign, prob, grad in sorted(rows, key=lambda r: (r[0], order[(r[1], r[2])])):
        w.writerow([it, group, sign, "" if prob is None else repr(prob),
                    "" if grad is None else repr(grad)])
    return buf.getvalue()


def write_diagnostics(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(list(r)) + "\n")


def read_diagnostics(path):
    with open(path, encoding="utf-8") as fh:
        return [tuple(json.loads(line)) for line in fh if line.strip()]


def read_trace_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["iter"] = int(r["iter"])
        for k in ("mean_prob", "mean_abs_grad"):
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


def tail_gap(rows, iterations=None):
    """Mean over the given iterations of |tail+ mean|grad| - tail- mean|grad||."""
    pos, neg = {}, {}
    for r in rows:
        it, group, sign, _, grad = r if isinstance(r, tuple) else (
            r["iter"], r["group"], r["sign"], r["mean_prob"], r["mean_abs_grad"])
        if group != "tail" or grad is None:
            continue
        (pos if sign == "positive" else neg)[it] = grad
    its = sorted(set(pos) & set(neg))
    if iterations is not None:
        its = [i for i in its if i in set(iterations)]
    if not its:
        return float("nan")
    return float(np.mean([abs(pos[i] - neg[i]) for i in its]))
