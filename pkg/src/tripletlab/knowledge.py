"""Instrument-anchored attribute knowledge, sentence templates and embeddings."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTS = ("tip", "wrist", "shaft")
BACKGROUND = "background"
NOT_PRESENT = "not present"


class KnowledgeSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentEntry:
    name: str
    tip_attrs: tuple[str, ...]
    wrist_attrs: tuple[str, ...]
    shaft_attrs: tuple[str, ...]

    def attrs(self, part):
        return {"tip": self.tip_attrs, "wrist": self.wrist_attrs, "shaft": self.shaft_attrs}[part]


@dataclass
class KnowledgeBase:
    entries: list[InstrumentEntry]

    @property
    def instruments(self):
        return [e for e in self.entries if e.name != BACKGROUND]

    def union(self, part):
        """Deduplicated phrases for one part, in first-seen order."""
        seen = {}
        for e in self.entries:
            for phrase in e.attrs(part):
                seen.setdefault(phrase, None)
        return list(seen)

    def sentence_ids(self):
        return [sentence_id(part, ph) for part in PARTS for ph in self.union(part)]

    def sentences(self):
        return {sentence_id(part, ph): render_sentence(part, ph)
                for part in PARTS for ph in self.union(part)}

    def to_json(self):
        return [{"instrument": e.name,
                 "attribute": {p: list(e.attrs(p)) for p in PARTS}} for e in self.entries]


def sentence_id(part, phrase):
    return f"{part}:{phrase}"


def _parse_entry(obj, i):
    if not isinstance(obj, dict) or "instrument" not in obj:
        raise KnowledgeSchemaError(f"record {i}: missing 'instrument'")
    name = obj["instrument"]
    if not isinstance(name, str) or not name.strip():
        raise KnowledgeSchemaError(f"record {i}: empty instrument name")
    attrs = obj.get("attribute")
    if not isinstance(attrs, dict):
        raise KnowledgeSchemaError(f"instrument {name!r}: missing 'attribute' object")
    lists = []
    for part in PARTS:
        phrases = attrs.get(part)
        if not isinstance(phrases, list) or not phrases:
            raise KnowledgeSchemaError(f"instrument {name!r}: missing or empty '{part}' list")
        cleaned = []
        for ph in phrases:
            if not isinstance(ph, str) or not ph.strip():
                raise KnowledgeSchemaError(f"instrument {name!r}, part '{part}': empty phrase")
            ph = ph.strip()
            if ph not in cleaned:
                cleaned.append(ph)
        lists.append(tuple(cleaned))
    return InstrumentEntry(name.strip(), *lists)


def parse_knowledge(records) -> KnowledgeBase:
    if not isinstance(records, list):
        raise KnowledgeSchemaError("knowledge file must hold a top-level list")
    entries = [_parse_entry(obj, i) for i, obj in enumerate(records)]
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise KnowledgeSchemaError("duplicate instrument names")
    if BACKGROUND not in names:
        entries.append(InstrumentEntry(BACKGROUND, (NOT_PRESENT,), (NOT_PRESENT,), (NOT_PRESENT,)))
    return KnowledgeBase(entries)


def parse_knowledge_file(path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        return parse_knowledge(json.load(fh))


def render_sentence(part, phrase):
    if part not in PARTS:
        raise ValueError(f"unknown part {part!r}")
    if not phrase or not phrase.strip():
        raise ValueError("phrase must be nonempty")
    return f"The {part} of the surgical instrument is {phrase}."


def stub_encode(sentence, dim, seed=0):
    """Deterministic unit-norm pseudo-embedding seeded by a hash of the sentence."""
    if dim < 2:
        raise ValueError("embedding dim must be >= 2")
    digest = hashlib.sha256(f"{seed}\x00{sentence}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    source: str = "stub"
    dim: int = field(init=False)

    def __post_init__(self):
        dims = {v.shape[0] for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding dims differ: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def __len__(self):
        return len(self.vectors)

    def __getitem__(self, key):
        return self.vectors[key]

    def subset(self, ids):
        return [self.vectors[i] for i in ids]


def stub_table(kb: KnowledgeBase, dim, seed=0) -> EmbeddingTable:
    return EmbeddingTable({sid: stub_encode(text, dim, seed)
                           for sid, text in kb.sentences().items()}, source="stub")


def write_embeddings(table: EmbeddingTable, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim={table.dim} source={table.source}\n")
        for sid, vec in table.vectors.items():
            fh.write(sid + "\t" + ",".join(repr(float(x)) for x in vec) + "\n")


def ingest_embeddings(path, expected_ids=None) -> EmbeddingTable:
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                sid, payload = line.split("\t", 1)
                vec = np.array([float(x) for x in payload.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record") from exc
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(
                    f"{path}:{lineno}: dimension {vec.shape[0]} differs from {dim}")
            vectors[sid] = vec
    if expected_ids is not None:
        missing = [i for i in expected_ids if i not in vectors]
        if missing:
            raise KeyError(f"embedding file lacks ids: {missing[:5]}")
    return EmbeddingTable(vectors, source="file")


def fixture_path():
    return Path(__file__).parent / "fixtures" / "knowledge_cholect45.json"
