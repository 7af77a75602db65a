"""Temporal attention backbone, temporal-spatial task-prompt adapter and task heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (AttentionConfig, DimensionError, Linear, MLP, Module,
                   MultiHeadAttention, Parameter, uniform_init)

TASKS = ("I", "V", "T", "IVT")
DEFAULT_CLASSES = {"I": 6, "V": 10, "T": 15, "IVT": 100}


@dataclass
class ModelConfig:
    in_dim: int = 32
    model_dim: int = 32
    num_heads: int = 4
    base_layers: int = 2
    pyramid_layers: int = 0
    pyramid_scale: int = 2
    max_len: int = 64
    spatial_heads: int = 4
    mlp_hidden: int = 32
    activation: str = "gelu"
    alpha: float = 0.1
    use_tsp: bool = True
    use_gpi: bool = False
    prefix_location: int = 0
    prefix_dim: int = 32
    per_frame_prefix: bool = False
    positional_encoding: bool = False
    num_tasks: int = 4
    classes: dict = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    seed: int = 0

    def __post_init__(self):
        if self.base_layers < 1:
            raise ValueError("base_layers must be >= 1")
        if self.pyramid_layers < 0 or self.pyramid_scale < 1:
            raise ValueError("invalid pyramid settings")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.num_tasks != 4:
            raise ValueError("the adapter is wired for exactly 4 tasks (i, v, t, ivt)")
        AttentionConfig(self.model_dim, self.num_heads)
        AttentionConfig(self.max_len, self.spatial_heads)

    @property
    def depth(self):
        return self.base_layers + self.pyramid_layers

    def to_dict(self):
        return asdict(self)


class Backbone(Module):
    """Input projection, stacked self-attention layers, optional pyramid path.

    Layer index ``l`` counts base layers first, then pyramid layers; a prefix
    is injected as extra key/value rows at exactly one layer.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.input_proj = Linear(cfg.in_dim, cfg.model_dim, rng)
        acfg = AttentionConfig(cfg.model_dim, cfg.num_heads, include_residual=True)
        self.layers = [MultiHeadAttention(acfg, rng) for _ in range(cfg.depth)]

    def _attend(self, i, x, prefix, prefix_mask):
        layer = self.layers[i]
        if prefix is None or i != self.cfg.prefix_location:
            out, cache = layer.forward(x)
            return out, (cache, None)
        if prefix_mask is not None and prefix_mask.shape[0] != x.shape[0]:
            raise DimensionError("per-frame prefix needs a full-length layer")
        kv = np.concatenate([prefix, x], axis=0)
        out, cache = layer.forward(x, kv, kv, prefix_mask)
        return out, (cache, prefix.shape[0])

    def _attend_backward(self, i, dy, cache):
        inner, n_prefix = cache
        dq, dk, dv = self.layers[i].backward(dy, inner)
        if n_prefix is None:
            return dq + dk + dv, None
        dkv = dk + dv
        return dq + dkv[n_prefix:], dkv[:n_prefix]

    def forward(self, X, prefix=None, prefix_mask=None):
        cfg = self.cfg
        if X.ndim != 2 or X.shape[0] < 1:
            raise DimensionError(f"expected an (L, E0) sequence, got {X.shape}")
        if prefix is not None and not 0 <= cfg.prefix_location < cfg.depth:
            raise DimensionError(
                f"prefix location {cfg.prefix_location} outside depth {cfg.depth}")
        if prefix is not None and prefix.shape[0] == 0:
            prefix, prefix_mask = None, None
        h, c_in = self.input_proj.forward(X)
        if cfg.positional_encoding:
            h = h + sinusoidal_encoding(X.shape[0], cfg.model_dim)
        caches = []
        for i in range(cfg.base_layers):
            h, c = self._attend(i, h, prefix, prefix_mask)
            caches.append(c)
        base = h
        L = X.shape[0]
        out = base
        pyr = []
        x = base
        for p in range(cfg.pyramid_layers):
            pooled, group = _avg_pool(x, cfg.pyramid_scale)
            y, c = self._attend(cfg.base_layers + p, pooled, prefix, prefix_mask)
            index = _up_index(L, cfg.pyramid_scale ** (p + 1), y.shape[0])
            out = out + y[index]
            pyr.append((group, c, index, y.shape[0], x.shape[0]))
            x = y
        return out, (c_in, caches, pyr)

    def backward(self, dout, cache):
        c_in, caches, pyr = cache
        cfg = self.cfg
        dprefix = None
        dbase = dout.copy()
        # pyramid levels feed forward sequentially, so walk them in reverse
        dx_next = None
        for p in reversed(range(len(pyr))):
            group, c, index, n_y, n_x = pyr[p]
            dy = np.zeros((n_y, dout.shape[1]))
            np.add.at(dy, index, dout)
            if dx_next is not None:
                dy += dx_next
            dpooled, dpre = self._attend_backward(cfg.base_layers + p, dy, c)
            if dpre is not None:
                dprefix = dpre
            dx_next = _avg_pool_backward(dpooled, group, n_x)
        if dx_next is not None:
            dbase += dx_next
        dh = dbase
        for i in reversed(range(cfg.base_layers)):
            dh, dpre = self._attend_backward(i, dh, caches[i])
            if dpre is not None:
                dprefix = dpre
        dX = self.input_proj.backward(dh, c_in)
        return dX, dprefix


def sinusoidal_encoding(L, E):
    pos = np.arange(L)[:, None]
    i = np.arange(E)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / E)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _avg_pool(x, s):
    n = x.shape[0]
    group = np.arange(n) // s
    m = int(group[-1]) + 1
    sums = np.zeros((m, x.shape[1]))
    np.add.at(sums, group, x)
    counts = np.bincount(group, minlength=m).astype(np.float64)
    return sums / counts[:, None], (group, counts)


def _avg_pool_backward(dy, group_info, n):
    group, counts = group_info
    return dy[group] / counts[group][:, None]


def _up_index(L, stride, n):
    return np.minimum(np.arange(L) // stride, n - 1)


class TaskPromptAdapter(Module):
    """Temporal prompting, spatial prompting over the transposed feature map, fusion."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        E, M = cfg.model_dim, cfg.num_tasks
        self.params["prompts"] = Parameter(uniform_init(rng, E, (M, E)))
        self.temporal = MultiHeadAttention(AttentionConfig(E, cfg.num_heads, True), rng)
        self.spatial_in = MLP(E, cfg.mlp_hidden, cfg.max_len, rng, cfg.activation)
        self.spatial = MultiHeadAttention(
            AttentionConfig(cfg.max_len, cfg.spatial_heads, include_residual=False), rng)
        self.spatial_out = MLP(cfg.max_len, cfg.mlp_hidden, E, rng, cfg.activation)

    @property
    def prompts(self):
        return self.params["prompts"].value

    def temporal_prompting(self, Xhat, Q):
        L = Xhat.shape[0]
        if Q.shape[1] != Xhat.shape[1]:
            raise DimensionError("prompt and feature dims differ")
        out, cache = self.temporal.forward(np.concatenate([Xhat, Q], axis=0))
        return out[:L], out[L:], cache

    def _pad_t(self, Xhat):
        L, E = Xhat.shape
        if L > self.cfg.max_len:
            raise DimensionError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        padded = np.zeros((self.cfg.max_len, E))
        padded[:L] = Xhat
        return padded.T

    def spatial_prompting(self, Xhat, Q):
        q, c_in = self.spatial_in.forward(Q)
        xt = self._pad_t(Xhat)
        s, c_att = self.spatial.forward(q, xt, xt)
        ps, c_out = self.spatial_out.forward(s)
        return ps, (c_in, c_att, c_out)

    def forward(self, Xhat):
        Q = self.prompts
        F_t, P_t, c_t = self.temporal_prompting(Xhat, Q)
        P_s, c_s = self.spatial_prompting(Xhat, Q)
        Qt = fuse_task_prompts(P_t, P_s)
        Z = expand_combine(F_t, Qt)
        return Z, (c_t, c_s, Xhat.shape[0])

    def backward(self, dZ, cache):
        c_t, c_s, L = cache
        dF_t = dZ.sum(axis=0)
        dQt = dZ.sum(axis=1)
        c_in, c_att, c_out = c_s
        dsp = self.spatial_out.backward(dQt, c_out)
        dq, dk, dv = self.spatial.backward(dsp, c_att)
        dQ = self.spatial_in.backward(dq, c_in)
        dXhat = (dk + dv).T[:L].copy()
        dC = sum(self.temporal.backward(np.concatenate([dF_t, dQt], axis=0), c_t))
        dXhat += dC[:L]
        self.params["prompts"].grad += dQ + dC[L:]
        return dXhat


def fuse_task_prompts(P_t, P_s):
    if P_t.shape != P_s.shape:
        raise DimensionError(f"prompt shapes differ: {P_t.shape} vs {P_s.shape}")
    return P_t + P_s


def expand_combine(F_t, Qt):
    if F_t.shape[1] != Qt.shape[1]:
        raise DimensionError("feature and prompt dims differ")
    return F_t[None, :, :] + Qt[:, None, :]


def triplet_fusion(Z, fused, alpha):
    """alpha * (z_i + z_v + z_t + z_ivt) + fused, with ``fused`` the fusion block output."""
    if Z.shape[0] != 4:
        raise DimensionError(f"expected 4 task slices, got {Z.shape[0]}")
    return alpha * Z.sum(axis=0) + fused


class TripletModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # one stream per submodule: toggling a module leaves the others' init untouched
        streams = [np.random.default_rng(s)
                   for s in np.random.SeedSequence(cfg.seed).spawn(5)]
        E = cfg.model_dim
        self.backbone = Backbone(cfg, streams[0])
        self.gpi_proj = Linear(cfg.prefix_dim, E, streams[1]) if cfg.use_gpi else None
        self.adapter = TaskPromptAdapter(cfg, streams[2]) if cfg.use_tsp else None
        # fusion attention has no residual so a zero-weight block contributes zero
        self.fusion = MultiHeadAttention(AttentionConfig(E, cfg.num_heads, False), streams[3])
        self.heads = [Linear(E, cfg.classes[t], streams[4]) for t in TASKS]

    def build_prefix(self, source):
        """Project selected prompt means into the backbone's key/value space."""
        if source is None or self.gpi_proj is None:
            return None, None, None
        if source.ndim == 3:
            L, P, _ = source.shape
            rows, c = self.gpi_proj.forward(source.reshape(L * P, -1))
            mask = np.zeros((L, L * P + L), dtype=bool)
            for n in range(L):
                mask[n, n * P:(n + 1) * P] = True
            mask[:, L * P:] = True
            return rows, mask, c
        if source.shape[0] == 0:
            return None, None, None
        rows, c = self.gpi_proj.forward(source)
        return rows, None, c

    def forward(self, X, prefix_source=None):
        X = np.asarray(X, dtype=np.float64)
        prefix, mask, c_pre = self.build_prefix(prefix_source)
        Xhat, c_bb = self.backbone.forward(X, prefix, mask)
        fused, c_f = self.fusion.forward(Xhat)
        if self.adapter is not None:
            Z, c_ad = self.adapter.forward(Xhat)
            feats = [Z[0], Z[1], Z[2], triplet_fusion(Z, fused, self.cfg.alpha)]
        else:
            Z, c_ad = None, None
            feats = [Xhat, Xhat, Xhat, fused]
        logits, c_heads = {}, []
        for task, head, f in zip(TASKS, self.heads, feats):
            logits[task], c = head.forward(f)
            c_heads.append(c)
        return logits, (c_pre, c_bb, c_f, c_ad, c_heads, Z, Xhat.shape)

    def backward(self, dlogits, cache):
        c_pre, c_bb, c_f, c_ad, c_heads, Z, xshape = cache
        dfeats = [head.backward(dlogits[t], c) for t, head, c in zip(TASKS, self.heads, c_heads)]
        if self.adapter is not None:
            dZ = np.zeros_like(Z)
            for m in range(3):
                dZ[m] += dfeats[m]
            dZ += self.cfg.alpha * dfeats[3][None]
            dXhat = sum(self.fusion.backward(dfeats[3], c_f))
            dXhat = dXhat + self.adapter.backward(dZ, c_ad)
        else:
            dXhat = dfeats[0] + dfeats[1] + dfeats[2] + sum(self.fusion.backward(dfeats[3], c_f))
        dX, dprefix = self.backbone.backward(dXhat, c_bb)
        if dprefix is not None and c_pre is not None:
            self.gpi_proj.backward(dprefix, c_pre)
        return dX
