"""Synthetic long-tailed compositional triplet videos and their on-disk format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("I", "V", "T", "IVT")
MANIFEST = "manifest.json"
FEATURES = "features.bin"
LABELS = "labels.bin"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    n_instruments: int
    n_verbs: int
    n_targets: int
    valid_triplets: tuple[tuple[int, int, int], ...]

    @property
    def n_triplets(self):
        return len(self.valid_triplets)

    @property
    def sizes(self):
        return {"I": self.n_instruments, "V": self.n_verbs, "T": self.n_targets,
                "IVT": self.n_triplets}

    def component(self, task):
        """Component index of every triplet for task I, V or T."""
        col = {"I": 0, "V": 1, "T": 2}[task]
        return np.array([t[col] for t in self.valid_triplets], dtype=np.int64)

    def pair_index(self, kind):
        """Flat pair id per triplet for 'IV' (i*nV+v) or 'IT' (i*nT+t)."""
        if kind == "IV":
            return np.array([i * self.n_verbs + v for i, v, _ in self.valid_triplets])
        if kind == "IT":
            return np.array([i * self.n_targets + t for i, _, t in self.valid_triplets])
        raise ValueError(kind)

    def project_labels(self, y_ivt):
        """Component labels as the OR over active triplets."""
        y_ivt = np.asarray(y_ivt, dtype=np.uint8)
        out = {}
        for task in ("I", "V", "T"):
            comp = self.component(task)
            lab = np.zeros((y_ivt.shape[0], self.sizes[task]), dtype=np.uint8)
            for g, c in enumerate(comp):
                lab[:, c] |= y_ivt[:, g]
            out[task] = lab
        out["IVT"] = y_ivt
        return out

    def to_json(self):
        return {"n_instruments": self.n_instruments, "n_verbs": self.n_verbs,
                "n_targets": self.n_targets,
                "valid_triplets": [list(t) for t in self.valid_triplets]}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["n_instruments"], doc["n_verbs"], doc["n_targets"],
                   tuple(tuple(int(x) for x in t) for t in doc["valid_triplets"]))


def build_label_space(seed=0, n_instruments=6, n_verbs=10, n_targets=15, n_triplets=100):
    grid = n_instruments * n_verbs * n_targets
    if n_triplets > grid:
        raise ValueError(f"{n_triplets} triplets do not fit a {grid}-cell grid")
    if n_triplets < max(n_instruments, n_verbs, n_targets):
        raise ValueError("too few triplets to cover every component")
    rng = np.random.default_rng(seed)
    sizes = (n_instruments, n_verbs, n_targets)
    # a covering core: max(sizes) triplets cycling through shuffled component values,
    # distinct because the longest axis never repeats
    perms = [rng.permutation(n) for n in sizes]
    core = {tuple(int(perms[a][k % sizes[a]]) for a in range(3)) for k in range(max(sizes))}
    taken = sorted(np.ravel_multi_index(tuple(np.array(sorted(core)).T), sizes).tolist())
    rest = np.setdiff1d(np.arange(grid), taken)
    extra = rng.choice(rest, size=n_triplets - len(core), replace=False)
    cells = rng.permutation(np.concatenate([taken, extra]))
    trip = [tuple(int(x) for x in np.unravel_index(c, sizes)) for c in cells]
    return LabelSpace(n_instruments, n_verbs, n_targets, tuple(trip))


@dataclass(frozen=True)
class PowerLawConfig:
    exponent: float = 1.5
    n_max: int = 4000
    n_min: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.n_max >= self.n_min >= 1:
            raise ValueError("need n_max >= n_min >= 1")
        if self.exponent < 0:
            raise ValueError("exponent must be >= 0")


def sample_class_counts(cfg: PowerLawConfig, G):
    """Rank-r target count proportional to r**-s, rescaled onto [n_min, n_max]."""
    if G < 2:
        raise ValueError("need at least two classes")
    if cfg.exponent == 0:
        if cfg.n_max != cfg.n_min:
            raise ValueError("a flat power law requires n_max == n_min")
        return np.full(G, cfg.n_max, dtype=np.int64)
    r = np.arange(1, G + 1, dtype=np.float64)
    w = r ** -cfg.exponent
    lo = G ** -cfg.exponent
    frac = (w - lo) / (1.0 - lo)
    counts = np.rint(cfg.n_min + (cfg.n_max - cfg.n_min) * frac).astype(np.int64)
    counts[0], counts[-1] = cfg.n_max, cfg.n_min
    return counts


@dataclass
class TripletSampler:
    """Triplet draws plus one fixed feature centre per triplet.

    Outside a split the draws are weighted by the target counts. Inside a
    split (see ``start_split``) they are weighted by the frames each triplet
    still owes, and every frame is topped up so the quota can always be met:
    at most ``max_active`` triplets per frame, no triplet owing more frames
    than remain. Realised per-split counts then equal the quota exactly.
    """
    counts: np.ndarray
    centers: np.ndarray
    p_empty: float = 0.05
    remaining: np.ndarray | None = None
    frames_left: int = 0

    @classmethod
    def create(cls, counts, feature_dim, seed, p_empty=0.05):
        rng = np.random.default_rng(seed)
        c = rng.standard_normal((len(counts), feature_dim))
        return cls(np.asarray(counts, dtype=np.int64), c, p_empty)

    @property
    def probs(self):
        w = self.counts if self.remaining is None else self.remaining
        return w / w.sum()

    def start_split(self, quota, n_frames, max_active=3):
        quota = np.asarray(quota, dtype=np.int64)
        if quota.max(initial=0) > n_frames or quota.sum() > n_frames * max_active:
            raise ValueError(f"{n_frames} frames cannot hold the requested class counts "
                             f"(total {int(quota.sum())}, largest {int(quota.max())})")
        self.remaining = quota.copy()
        self.frames_left = int(n_frames)

    def end_split(self):
        left = None if self.remaining is None else int(self.remaining.sum())
        self.remaining = None
        if left:
            raise RuntimeError(f"{left} quota frames left unassigned")

    def _pick(self, rng, n, exclude=()):
        w = (self.counts if self.remaining is None else self.remaining).astype(np.float64)
        w[list(exclude)] = 0.0
        n = min(n, int(np.count_nonzero(w)))
        if n <= 0:
            return []
        return [int(g) for g in rng.choice(len(w), size=n, replace=False, p=w / w.sum())]

    def draw(self, rng, max_active=3):
        if rng.random() < self.p_empty:
            return ()
        if self.remaining is None:
            n = int(rng.integers(1, max_active + 1))
        else:
            # track the density the quota needs
            target = self.remaining.sum() / max(self.frames_left, 1)
            n = int(target) + int(rng.random() < target - int(target))
            n = min(max(n, 1), max_active)
        return tuple(sorted(self._pick(rng, n)))

    def settle(self, rng, active, max_active=3):
        """Active set for the current frame under the quota, then consume it."""
        if self.remaining is None:
            return tuple(active)
        r, F = self.remaining, self.frames_left
        act = [g for g in active if r[g] > 0]
        forced = [int(g) for g in np.flatnonzero(r >= F) if g not in act]
        act = forced + act
        need = int(r.sum()) - (F - 1) * max_active
        if len(act) < need:
            act += self._pick(rng, need - len(act), exclude=act)
        if len(act) > max_active:
            keep = set(np.flatnonzero(r >= F).tolist())
            act = [g for g in act if g in keep] + [g for g in act if g not in keep]
            act = act[:max_active]
        act = tuple(sorted(act))
        r[list(act)] -= 1
        self.frames_left -= 1
        return act


@dataclass
class SyntheticVideo:
    name: str
    features: np.ndarray  # float32, (L, E0)
    labels: dict  # task -> uint8 (L, G_task)
    seed: int = 0
    split: str = "train"

    @property
    def length(self):
        return self.features.shape[0]


def generate_video(space: LabelSpace, sampler: TripletSampler, L, p_stay=0.9,
                   noise_sigma=0.25, seed=0, name="video", split="train", max_active=3):
    if L < 1:
        raise ValueError("L must be >= 1")
    if not 0.0 <= p_stay < 1.0:
        raise ValueError("p_stay must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    G = space.n_triplets
    E0 = sampler.centers.shape[1]
    y = np.zeros((L, G), dtype=np.uint8)
    feats = np.zeros((L, E0))
    active = ()
    for t in range(L):
        if t == 0 or rng.random() >= p_stay:
            active = sampler.draw(rng, max_active)
        active = sampler.settle(rng, active, max_active)
        if active:
            y[t, list(active)] = 1
            feats[t] = sampler.centers[list(active)].mean(axis=0)
    feats = feats + noise_sigma * rng.standard_normal((L, E0))
    return SyntheticVideo(name, feats.astype(np.float32), space.project_labels(y), seed, split)


@dataclass
class DataConfig:
    n_train: int = 80
    n_test: int = 40
    length: int = 64
    feature_dim: int = 32
    p_stay: float = 0.9
    noise_sigma: float = 0.25
    p_empty: float = 0.05
    max_active: int = 3
    exponent: float = 1.5
    n_max: int = 4000
    n_min: int = 8
    n_instruments: int = 6
    n_verbs: int = 10
    n_targets: int = 15
    n_triplets: int = 100
    exact_counts: bool = True  # realise the target counts exactly, split by video share
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Dataset:
    space: LabelSpace
    target_counts: np.ndarray
    videos: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def split(self, name):
        return [v for v in self.videos if v.split == name]

    def class_counts(self, split=None, task="IVT"):
        vids = self.videos if split is None else self.split(split)
        total = np.zeros(self.space.sizes[task], dtype=np.int64)
        for v in vids:
            total += v.labels[task].sum(axis=0, dtype=np.int64)
        return total


def split_quotas(counts, n_train, n_test):
    """Per-class frame counts for each split, proportional to the video counts."""
    counts = np.asarray(counts, dtype=np.int64)
    train = np.rint(counts * (n_train / (n_train + n_test))).astype(np.int64)
    return {"train": train, "test": counts - train}


def generate_dataset(cfg: DataConfig) -> Dataset:
    space = build_label_space(cfg.seed, cfg.n_instruments, cfg.n_verbs, cfg.n_targets,
                              cfg.n_triplets)
    counts = sample_class_counts(PowerLawConfig(cfg.exponent, cfg.n_max, cfg.n_min, cfg.seed),
                                 space.n_triplets)
    ss = np.random.SeedSequence(cfg.seed)
    center_seed, *video_seeds = ss.generate_state(1 + cfg.n_train + cfg.n_test)
    sampler = TripletSampler.create(counts, cfg.feature_dim, int(center_seed), cfg.p_empty)
    n_videos = cfg.n_train + cfg.n_test
    quotas = split_quotas(counts, cfg.n_train, cfg.n_test)
    videos = []
    for split, lo, hi in (("train", 0, cfg.n_train), ("test", cfg.n_train, n_videos)):
        if hi == lo:
            continue
        if cfg.exact_counts:
            sampler.start_split(quotas[split], (hi - lo) * cfg.length, cfg.max_active)
        for i in range(lo, hi):
            videos.append(generate_video(space, sampler, cfg.length, cfg.p_stay,
                                         cfg.noise_sigma, int(video_seeds[i]), f"video{i:03d}",
                                         split, cfg.max_active))
        if cfg.exact_counts:
            sampler.end_split()
    return Dataset(space, counts, videos, asdict(cfg))


# -- serialization -------------------------------------------------------------

def serialize_dataset(ds: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    f_off = 0
    l_off = 0
    with open(path / FEATURES, "wb") as ff, open(path / LABELS, "wb") as lf:
        for v in ds.videos:
            blob = np.ascontiguousarray(v.features, dtype="<f4").tobytes()
            ff.write(blob)
            labels = {}
            for task in TASKS:
                packed = np.packbits(v.labels[task].astype(np.uint8), axis=1)
                raw = packed.tobytes()
                lf.write(raw)
                labels[task] = {"offset": l_off, "nbytes": len(raw),
                                "row_bytes": int(packed.shape[1])}
                l_off += len(raw)
            entries.append({
                "name": v.name, "split": v.split, "seed": int(v.seed),
                "frames": int(v.features.shape[0]), "feature_dim": int(v.features.shape[1]),
                "feature_offset": f_off, "feature_nbytes": len(blob),
                "labels": labels,
                "class_counts": v.labels["IVT"].sum(axis=0).astype(int).tolist(),
            })
            f_off += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "label_space": ds.space.to_json(),
                "target_counts": [int(c) for c in ds.target_counts],
                "config": ds.config, "videos": entries}
    with open(path / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
        feat_bytes = (path / FEATURES).read_bytes()
        label_bytes = (path / LABELS).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing dataset file: {exc.filename}") from exc
    space = LabelSpace.from_json(manifest["label_space"])
    sizes = space.sizes
    videos = []
    for e in manifest["videos"]:
        L, E0 = e["frames"], e["feature_dim"]
        start, n = e["feature_offset"], e["feature_nbytes"]
        if n != L * E0 * 4 or start + n > len(feat_bytes):
            raise DatasetFormatError(
                f"video {e['name']}: feature blob length mismatch "
                f"(need {L * E0 * 4} bytes at offset {start}, file has {len(feat_bytes)})")
        feats = np.frombuffer(feat_bytes, dtype="<f4", count=L * E0, offset=start)
        feats = feats.reshape(L, E0).astype(np.float32)
        labels = {}
        for task in TASKS:
            meta = e["labels"][task]
            if meta["offset"] + meta["nbytes"] > len(label_bytes) \
                    or meta["nbytes"] != L * meta["row_bytes"]:
                raise DatasetFormatError(f"video {e['name']}: label blob length mismatch ({task})")
            raw = np.frombuffer(label_bytes, dtype=np.uint8, count=meta["nbytes"],
                                offset=meta["offset"]).reshape(L, meta["row_bytes"])
            labels[task] = np.unpackbits(raw, axis=1, count=sizes[task]).astype(np.uint8)
        videos.append(SyntheticVideo(e["name"], feats, labels, e["seed"], e["split"]))
    return Dataset(space, np.array(manifest["target_counts"], dtype=np.int64), videos,
                   manifest.get("config", {}))
