"""Training loop, evaluation, ablation grid and prefix-location sweep."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gpi, losses
from .checkpoint import load_checkpoint, save_checkpoint
from .core import NonFiniteError, sgd_momentum_step
from .data import Dataset, LabelSpace
from .knowledge import (BACKGROUND, PARTS, KnowledgeBase, EmbeddingTable, ingest_embeddings,
                        parse_knowledge_file, sentence_id)
from .metrics import AP_KEYS, ap_report, group_mean_ap
from .model import TASKS, ModelConfig, TripletModel
from .trace import rows_to_csv, trace_cells, write_diagnostics
from . import kernels

log = logging.getLogger(__name__)

LOSS_KINDS = ("cgl", "bce", "focal", "eq")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-2
    momentum: float = 0.95
    epochs: int = 50
    seed: int = 0
    gpi: bool = True
    tsp: bool = True
    loss: str = "cgl"
    gamma: float = 0.1
    alpha: float = 0.1
    prefix_location: int = 0
    topk: int = 1
    per_frame_prefix: bool = False
    focusing: float = 2.0
    eq_prob: float = 1.0
    membership: str = "any"
    head_min: float | None = None
    tail_max: float | None = None
    task_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    model_dim: int = 32
    num_heads: int = 4
    base_layers: int = 2
    pyramid_layers: int = 0
    mlp_hidden: int = 32
    spatial_heads: int = 4
    activation: str = "gelu"
    positional_encoding: bool = False
    eval_every: int = 10
    ap_pooling: str = "frames"  # or "video"
    component_source: str = "triplet"  # or "heads"
    lr_schedule: str = "constant"  # or "cosine" (decays to 0 over the run)
    grad_clip: float | None = None  # global L2 norm bound, None disables
    reduction: str = "mean"  # "mean" over frames x classes, or "frame" (sum over classes)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.topk < 0:
            raise ValueError("topk must be >= 0")
        if self.ap_pooling not in ("frames", "video"):
            raise ValueError("ap_pooling must be 'frames' or 'video'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.reduction not in ("mean", "frame"):
            raise ValueError("reduction must be 'mean' or 'frame'")
        if self.component_source not in ("triplet", "heads"):
            raise ValueError("component_source must be 'triplet' or 'heads'")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class KnowledgeInputs:
    kb: KnowledgeBase
    table: EmbeddingTable


def load_kb_dir(path) -> KnowledgeInputs:
    path = Path(path)
    kb = parse_knowledge_file(path / "knowledge.json")
    table = ingest_embeddings(path / "embeddings.tsv", kb.sentence_ids())
    return KnowledgeInputs(kb, table)


def taxonomy_for(counts, cfg: TrainConfig):
    head_min, tail_max = cfg.head_min, cfg.tail_max
    if head_min is None or tail_max is None:
        h, t = losses.scaled_thresholds(counts)
        head_min = h if head_min is None else head_min
        tail_max = t if tail_max is None else tail_max
    return losses.build_taxonomy(counts, head_min, tail_max)


def fit_pools(knowledge: KnowledgeInputs, videos, space: LabelSpace):
    """Pools from the knowledge embeddings with variances fit on training frames.

    Instrument entry i of the knowledge base is tied to instrument label i;
    the background entry is tied to frames without any instrument.
    """
    kb = knowledge.kb
    if len(kb.instruments) != space.n_instruments:
        raise ValueError(f"knowledge base has {len(kb.instruments)} instruments, "
                         f"label space has {space.n_instruments}")
    pools = gpi.pools_from_kb(kb, knowledge.table)
    frames_by_entry = {e.name: [] for e in kb.entries}
    for v in videos:
        feats = v.features.astype(np.float64)
        inst = v.labels["I"]
        for i, e in enumerate(kb.instruments):
            rows = feats[inst[:, i] > 0]
            if len(rows):
                frames_by_entry[e.name].append(rows)
        bg = feats[inst.sum(axis=1) == 0]
        if len(bg):
            frames_by_entry[BACKGROUND].append(bg)
    attr_feats = {}
    for e in kb.entries:
        chunks = frames_by_entry[e.name]
        if not chunks:
            continue
        block = np.concatenate(chunks)
        for part in PARTS:
            for phrase in e.attrs(part):
                attr_feats.setdefault(sentence_id(part, phrase), []).append(block)
    attr_feats = {k: np.concatenate(v) for k, v in attr_feats.items()}
    return {part: gpi.fit_covariance(pools[part], attr_feats) for part in PARTS}


def model_config_for(cfg: TrainConfig, space: LabelSpace, in_dim, max_len, prefix_dim):
    return ModelConfig(
        in_dim=in_dim, model_dim=cfg.model_dim, num_heads=cfg.num_heads,
        base_layers=cfg.base_layers, pyramid_layers=cfg.pyramid_layers, max_len=max_len,
        spatial_heads=cfg.spatial_heads, mlp_hidden=cfg.mlp_hidden, activation=cfg.activation,
        alpha=cfg.alpha, use_tsp=cfg.tsp, use_gpi=cfg.gpi, prefix_location=cfg.prefix_location,
        prefix_dim=prefix_dim, per_frame_prefix=cfg.per_frame_prefix,
        positional_encoding=cfg.positional_encoding,
        classes=dict(space.sizes), seed=cfg.seed)


def triplet_loss(cfg: TrainConfig, logits, labels, taxonomy, rng):
    if cfg.loss == "bce":
        return losses.decompose_bce(logits, labels, taxonomy)
    if cfg.loss == "cgl":
        masks = losses.sample_masks(labels, taxonomy,
                                    losses.CGLConfig(cfg.gamma, cfg.membership), rng)
        return losses.cgl_loss(logits, labels, masks, taxonomy)
    if cfg.loss == "focal":
        return losses.baseline_losses("focal", logits, labels, {"focusing": cfg.focusing},
                                      taxonomy)
    return losses.baseline_losses("eq", logits, labels,
                                  {"suppress_prob": cfg.eq_prob, "rng": rng}, taxonomy)


@dataclass
class TrainedRun:
    model: TripletModel
    train_config: TrainConfig
    taxonomy: losses.Taxonomy
    space: LabelSpace
    pools: dict | None
    metrics: dict
    trace_rows: list

    def checkpoint_meta(self):
        meta = {"model_config": self.model.cfg.to_dict(),
                "train_config": self.train_config.to_dict(),
                "taxonomy": {"groups": list(self.taxonomy.groups),
                             "counts": list(self.taxonomy.counts),
                             "head_min": self.taxonomy.head_min,
                             "tail_max": self.taxonomy.tail_max},
                "label_space": self.space.to_json()}
        if self.pools is not None:
            meta["pools"] = {part: [{"attr_id": c.attr_id, "pi": c.pi, "var": c.var,
                                     "mu": c.mu.tolist()} for c in pool.components]
                             for part, pool in self.pools.items()}
        return meta

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.ckpt",
                        [(n, p.value) for n, p in self.model.named_parameters()],
                        self.checkpoint_meta())
        write_json(self.metrics, out / "metrics.json")
        write_json(self.train_config.to_dict(), out / "config.json")
        write_diagnostics(self.trace_rows, out / "diagnostics.jsonl")
        (out / "trace.csv").write_text(rows_to_csv(self.trace_rows), encoding="utf-8")
        if self.pools is not None:
            gpi.dump_pools(self.pools, out / "pools.json")
        return out


def _clean(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _prefix_sources(pools, videos, cfg: TrainConfig):
    if pools is None:
        return [None] * len(videos)
    return [gpi.prefix_source(pools, v.features.astype(np.float64), cfg.topk,
                              cfg.per_frame_prefix) for v in videos]


def predict(model, videos, prefixes):
    out = []
    for v, src in zip(videos, prefixes):
        logits, _ = model.forward(v.features.astype(np.float64), src)
        out.append({t: kernels.sigmoid(logits[t]) for t in TASKS})
    return out


def evaluate(model, videos, space: LabelSpace, taxonomy, prefixes, cfg: TrainConfig):
    preds = predict(model, videos, prefixes)

    def report_for(pred_list, vids):
        scores = np.concatenate([p["IVT"] for p in pred_list])
        labels = np.concatenate([v.labels["IVT"] for v in vids])
        comp = None
        if cfg.component_source == "heads":
            comp = {t: np.concatenate([p[t] for p in pred_list]) for t in ("I", "V", "T")}
        return ap_report(scores, labels, space, comp)

    if cfg.ap_pooling == "frames":
        report, per_class, excluded = report_for(preds, videos)
    else:
        reps = [report_for([p], [v]) for p, v in zip(preds, videos)]
        report = {k: float(np.nanmean([r[0][k] for r in reps])) for k in AP_KEYS}
        per_class = {k: np.nanmean(np.stack([r[1][k] for r in reps]), axis=0)
                     for k in AP_KEYS}
        excluded = {k: [int(c) for c in np.flatnonzero(np.isnan(per_class[k]))]
                    for k in AP_KEYS}
    groups = {name: group_mean_ap(per_class["AP_IVT"], mask) for name, mask in
              (("head", taxonomy.is_head), ("medium", taxonomy.is_medium),
               ("tail", taxonomy.is_tail))}
    return {"report": report, "per_class_ivt": per_class["AP_IVT"], "groups": groups,
            "excluded_ivt": excluded["AP_IVT"]}


def learning_rate(cfg: TrainConfig, it, total):
    if cfg.lr_schedule == "constant" or total <= 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * it / total))


def clip_grad_norm(params, max_norm):
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def _seeded(seed, stream):
    return np.random.default_rng([int(seed), stream])


def train(cfg: TrainConfig, dataset: Dataset, knowledge: KnowledgeInputs | None = None,
          progress=None) -> TrainedRun:
    space = dataset.space
    train_v, test_v = dataset.split("train"), dataset.split("test")
    if not train_v:
        raise ValueError("dataset has no training videos")
    counts = dataset.class_counts("train")
    taxonomy = taxonomy_for(counts, cfg)
    pools = None
    prefix_dim = train_v[0].features.shape[1]
    if cfg.gpi:
        if knowledge is None:
            raise ValueError("GPI enabled but no knowledge base given")
        pools = fit_pools(knowledge, train_v, space)
        prefix_dim = next(iter(pools.values())).dim
    max_len = max(v.length for v in dataset.videos)
    mcfg = model_config_for(cfg, space, train_v[0].features.shape[1], max_len, prefix_dim)
    model = TripletModel(mcfg)
    params = model.parameters()
    train_pre = _prefix_sources(pools, train_v, cfg)
    test_pre = _prefix_sources(pools, test_v, cfg)
    order_rng = _seeded(cfg.seed, 1)
    mask_rng = _seeded(cfg.seed, 2)
    weights = {t: float(cfg.task_weights.get(t, 1.0)) for t in TASKS}

    trace_rows, epochs = [], []
    it = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_v))
        total = 0.0
        for vi in order:
            v = train_v[vi]
            X = v.features.astype(np.float64)
            model.zero_grad()
            logits, cache = model.forward(X, train_pre[vi])
            dlogits, loss_val = {}, 0.0
            for task in TASKS:
                if task == "IVT":
                    out = triplet_loss(cfg, logits[task], v.labels[task], taxonomy, mask_rng)
                else:
                    out = losses.decompose_bce(logits[task], v.labels[task])
                n = logits[task].size if cfg.reduction == "mean" else logits[task].shape[0]
                loss_val += weights[task] * out.value / n
                dlogits[task] = weights[task] * out.dloss_dlogits / n
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            trace_rows.extend(trace_cells(it, logits["IVT"], v.labels["IVT"],
                                          out.dloss_dlogits, taxonomy))
            model.backward(dlogits, cache)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            lr = learning_rate(cfg, it, cfg.epochs * len(train_v))
            try:
                for p in params:
                    sgd_momentum_step(p, lr, cfg.momentum)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite gradient at iteration {it}") from exc
            total += loss_val
            it += 1
        entry = {"epoch": epoch, "train_loss": total / len(train_v)}
        last = epoch == cfg.epochs - 1
        if test_v and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            ev = evaluate(model, test_v, space, taxonomy, test_pre, cfg)
            entry.update(ev["report"])
            entry["groups"] = ev["groups"]
        epochs.append(entry)
        if progress:
            progress(entry)
    final = evaluate(model, test_v, space, taxonomy, test_pre, cfg) if test_v else None
    metrics = {"epochs": epochs, "taxonomy_ratio": list(taxonomy.ratio()),
               "iterations": it, "kernel_backend": kernels.BACKEND}
    if final is not None:
        metrics.update({"final": final["report"], "groups": final["groups"],
                        "per_class_ivt": final["per_class_ivt"],
                        "excluded_ivt": final["excluded_ivt"]})
    return TrainedRun(model, cfg, taxonomy, space, pools, metrics, trace_rows)


def load_run(path):
    """Rebuild a trained model, its pools and settings from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    mcfg = ModelConfig(**meta["model_config"])
    model = TripletModel(mcfg)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.value[...] = arrays[name]
    tcfg = TrainConfig.from_dict(meta["train_config"])
    tax = meta["taxonomy"]
    taxonomy = losses.Taxonomy(tuple(tax["groups"]), tuple(tax["counts"]), tax["head_min"],
                               tax["tail_max"])
    pools = None
    if "pools" in meta:
        pools = {part: gpi.PromptPool(part, tuple(
            gpi.GaussianComponent(np.array(c["mu"]), c["var"], c["pi"], c["attr_id"])
            for c in meta["pools"][part])) for part in PARTS}
    return model, tcfg, taxonomy, pools, LabelSpace.from_json(meta["label_space"])


def eval_checkpoint(path, dataset: Dataset, split="test"):
    model, tcfg, taxonomy, pools, space = load_run(path)
    videos = dataset.split(split)
    ev = evaluate(model, videos, dataset.space, taxonomy, _prefix_sources(pools, videos, tcfg),
                  tcfg)
    return {**ev["report"], "groups": ev["groups"], "per_class_ivt": ev["per_class_ivt"],
            "excluded_ivt": ev["excluded_ivt"], "split": split, "frames":
            int(sum(v.length for v in videos))}


ABLATION_GRID = (
    ("baseline", {"loss": "bce", "gpi": False, "tsp": False}),
    ("+CGL", {"loss": "cgl", "gpi": False, "tsp": False}),
    ("+CGL+TSP", {"loss": "cgl", "gpi": False, "tsp": True}),
    ("+CGL+GPI", {"loss": "cgl", "gpi": True, "tsp": False}),
    ("+CGL+GPI+TSP", {"loss": "cgl", "gpi": True, "tsp": True}),
)


def ablate(base: TrainConfig, dataset: Dataset, knowledge, out_dir=None, grid=ABLATION_GRID):
    rows = []
    for name, toggles in grid:
        cfg = replace(base, **toggles)
        try:
            run = train(cfg, dataset, knowledge)
        except Exception:
            if out_dir is not None:
                write_ablation(rows, out_dir, partial=True)
            raise
        rows.append({"row": name, **toggles, **run.metrics["final"],
                     "groups": run.metrics["groups"]})
        log.info("ablation row %s: AP_IVT=%.4f", name, run.metrics["final"]["AP_IVT"])
    if out_dir is not None:
        write_ablation(rows, out_dir)
    return rows


def sweep_prefix_location(base: TrainConfig, dataset: Dataset, knowledge, locations=range(5)):
    locations = list(locations)
    depth = base.base_layers + base.pyramid_layers
    if max(locations) >= depth:
        raise ValueError(f"locations {locations} exceed backbone depth {depth}")
    rows = []
    for loc in locations:
        run = train(replace(base, gpi=True, prefix_location=loc), dataset, knowledge)
        rows.append({"location": loc, **run.metrics["final"]})
    return rows


def format_table(rows, key_col):
    head = [key_col] + list(AP_KEYS)
    lines = ["\t".join(head)]
    for r in rows:
        vals = [str(r[key_col])] + [
            "nan" if r.get(k) is None or not math.isfinite(r[k]) else f"{100 * r[k]:.2f}"
            for k in AP_KEYS]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def write_ablation(rows, out_dir, partial=False, sweep=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"rows": rows, "partial": partial}
    if sweep is not None:
        doc["locations"] = sweep
    write_json(doc, out / "ablation.json")
    (out / "ablation.tsv").write_text(format_table(rows, "row"), encoding="utf-8")
    if sweep is not None:
        (out / "locations.tsv").write_text(format_table(sweep, "location"), encoding="utf-8")
