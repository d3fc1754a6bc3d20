"""Domain types and ingestion for sentences, weak annotations and embeddings.

Annotations travel as JSONL (one sentence object per line) so they stay
inspectable; embeddings live in a separate little-endian binary because
they dominate the payload.  Everything is validated on load and the
resulting Dataset is immutable, so readers can share it freely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

O_INDEX = 0
EMBED_MAGIC = b"SCMM"
EMBED_VERSION = 1
SPLIT_NAMES = ("train", "valid", "test")


class ParseError(ValueError):
    """Malformed file content (bad JSON, bad binary header)."""


class SchemaError(ValueError):
    """Well-formed content that violates the dataset schema."""


@dataclass(frozen=True)
class LabelSet:
    """BIO label universe over an ordered list of entity types.

    Index layout: O at 0, then B-e/I-e pairs in entity order, so entity i
    owns indices 2i+1 (B) and 2i+2 (I).
    """

    entities: tuple[str, ...]
    labels: tuple[str, ...] = field(init=False)
    o_index: int = field(init=False, default=O_INDEX)

    def __post_init__(self):
        if not self.entities:
            raise ValueError("entity list must be non-empty")
        if len(set(self.entities)) != len(self.entities):
            raise ValueError("duplicate entity types")
        labels = ["O"]
        for ent in self.entities:
            labels.extend((f"B-{ent}", f"I-{ent}"))
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "labels", tuple(labels))

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SchemaError(f"unknown label {label!r}") from None

    def entity_of(self, idx: int) -> int | None:
        """Entity position for a B/I index, None for O."""
        return None if idx == O_INDEX else (idx - 1) // 2

    def is_begin(self, idx: int) -> bool:
        return idx != O_INDEX and (idx - 1) % 2 == 0

    def entity_to_label_indices(self) -> np.ndarray:
        """Map each label index to its per-entity reliability slot.

        Slot 0 is O; entity i maps both B and I to slot i+1.
        """
        out = [0]
        for i in range(self.n_entities):
            out.extend((i + 1, i + 1))
        return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]
    gold: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise SchemaError(f"sentence {self.id!r} has no tokens")
        if self.gold is not None and len(self.gold) != len(self.tokens):
            raise SchemaError(f"sentence {self.id!r}: gold length mismatch")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class WeakAnnotationMatrix:
    """K x T grid of observed label indices; O doubles as abstain."""

    lf_names: tuple[str, ...]
    obs: np.ndarray  # int, shape (K, T)

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.intp)
        if obs.ndim != 2 or obs.shape[0] != len(self.lf_names):
            raise SchemaError("annotation grid shape does not match LF names")
        object.__setattr__(self, "obs", obs)
        obs.setflags(write=False)

    @property
    def n_lfs(self) -> int:
        return len(self.lf_names)


@dataclass(frozen=True)
class EmbeddingSequence:
    """Sentence embedding at row 0, token embeddings at rows 1..T."""

    vectors: np.ndarray  # float32, shape (T+1, dim)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 2:
            raise SchemaError("embedding matrix must be (T+1) x dim with T >= 1")
        if not np.isfinite(v).all():
            raise SchemaError("non-finite embedding value")
        object.__setattr__(self, "vectors", v)
        v.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def sentence_vector(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def token_vectors(self) -> np.ndarray:
        return self.vectors[1:]


@dataclass(frozen=True)
class Triple:
    sentence: Sentence
    weak: WeakAnnotationMatrix
    embedding: EmbeddingSequence | None = None

    def __post_init__(self):
        if self.weak.obs.shape[1] != len(self.sentence):
            raise SchemaError(
                f"sentence {self.sentence.id!r}: annotation length "
                f"{self.weak.obs.shape[1]} != {len(self.sentence)} tokens")
        if self.embedding is not None:
            if self.embedding.vectors.shape[0] != len(self.sentence) + 1:
                raise SchemaError(
                    f"sentence {self.sentence.id!r}: embedding rows "
                    f"{self.embedding.vectors.shape[0]} != T+1")


@dataclass(frozen=True)
class Dataset:
    label_set: LabelSet
    splits: dict[str, tuple[Triple, ...]]

    @property
    def lf_names(self) -> tuple[str, ...]:
        for triples in self.splits.values():
            if triples:
                return triples[0].weak.lf_names
        return ()

    def split(self, name: str) -> tuple[Triple, ...]:
        if name not in self.splits:
            raise KeyError(f"no split named {name!r}")
        return self.splits[name]


# -- BIO validation ----------------------------------------------------------

def validate_bio(seq, label_set: LabelSet, mode: str = "strict") -> list[tuple[int, str]]:
    """Return (position, message) violations; empty list means valid.

    strict: every I-e must follow B-e or I-e of the same entity.
    conll:  a leading I-e opens a chunk (the convention the span decoder
            uses), so only nothing is flagged.
    """
    if mode not in ("strict", "conll"):
        raise ValueError(f"unknown BIO mode {mode!r}")
    violations = []
    if mode == "conll":
        return violations
    prev_ent = None
    for pos, idx in enumerate(seq):
        if idx < 0 or idx >= label_set.size:
            raise ValueError(f"label index {idx} out of range at {pos}")
        ent = label_set.entity_of(idx)
        if ent is not None and not label_set.is_begin(idx) and ent != prev_ent:
            violations.append(
                (pos, f"I-{label_set.entities[ent]} at {pos} does not continue a chunk"))
        prev_ent = ent
    return violations


# -- JSONL annotations -------------------------------------------------------

def _parse_record(obj: dict, label_set: LabelSet, lineno: int) -> tuple[Sentence, WeakAnnotationMatrix]:
    for key in ("id", "tokens", "annotations"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    sid = str(obj["id"])
    tokens = tuple(str(t) for t in obj["tokens"])
    gold = None
    if obj.get("labels") is not None:
        gold_strs = obj["labels"]
        if len(gold_strs) != len(tokens):
            raise SchemaError(f"record {sid!r}: labels length mismatch")
        gold = tuple(label_set.index(s) for s in gold_strs)
    ann = obj["annotations"]
    if not isinstance(ann, dict) or not ann:
        raise SchemaError(f"record {sid!r}: annotations must be a non-empty object")
    lf_names = tuple(ann.keys())
    obs = np.zeros((len(lf_names), len(tokens)), dtype=np.intp)
    for k, name in enumerate(lf_names):
        seq = ann[name]
        if len(seq) != len(tokens):
            raise SchemaError(
                f"record {sid!r}: annotation length {len(seq)} for LF {name!r} "
                f"!= {len(tokens)} tokens")
        obs[k] = [label_set.index(s) for s in seq]
    return Sentence(sid, tokens, gold), WeakAnnotationMatrix(lf_names, obs)


def load_split(path, label_set: LabelSet) -> tuple[Triple, ...]:
    """Parse one JSONL split file into validated triples (no embeddings)."""
    triples = []
    lf_names = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            sent, weak = _parse_record(obj, label_set, lineno)
            if lf_names is None:
                lf_names = weak.lf_names
            elif weak.lf_names != lf_names:
                raise SchemaError(
                    f"record {sent.id!r}: LF set {weak.lf_names} differs from "
                    f"{lf_names}")
            if sent.gold is not None:
                for pos, msg in validate_bio(sent.gold, label_set, mode="conll"):
                    raise SchemaError(f"record {sent.id!r}: {msg}")
            triples.append(Triple(sent, weak))
    return tuple(triples)


def load_dataset(path, entities) -> Dataset:
    """Load a dataset from a directory of <split>.jsonl files, or a single file.

    A single file becomes the train split.  Embeddings are attached
    separately by load_embeddings.
    """
    label_set = LabelSet(tuple(entities))
    path = Path(path)
    splits: dict[str, tuple[Triple, ...]] = {}
    if path.is_dir():
        for name in SPLIT_NAMES:
            f = path / f"{name}.jsonl"
            if f.exists():
                splits[name] = load_split(f, label_set)
        if not splits:
            raise ParseError(f"{path}: no <split>.jsonl files found")
    else:
        splits["train"] = load_split(path, label_set)
    names = {t.weak.lf_names for triples in splits.values() for t in triples}
    if len(names) > 1:
        raise SchemaError(f"LF sets differ across splits: {sorted(names)}")
    return Dataset(label_set, splits)


def write_split(path, triples, label_set: LabelSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            obj = {
                "id": t.sentence.id,
                "tokens": list(t.sentence.tokens),
                "annotations": {
                    name: [label_set.labels[i] for i in t.weak.obs[k]]
                    for k, name in enumerate(t.weak.lf_names)
                },
            }
            if t.sentence.gold is not None:
                obj["labels"] = [label_set.labels[i] for i in t.sentence.gold]
            fh.write(json.dumps(obj) + "\n")


# -- embedding binary --------------------------------------------------------

def write_embeddings(path, embeddings: list[np.ndarray]) -> None:
    """Write (T+1) x dim float32 blocks, sentence vector first, dataset order."""
    if not embeddings:
        raise ValueError("no embeddings to write")
    dim = embeddings[0].shape[1]
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, len(embeddings), dim))
        for mat in embeddings:
            mat = np.ascontiguousarray(mat, dtype="<f4")
            if mat.shape[1] != dim:
                raise ValueError("embedding dim differs across sentences")
            fh.write(struct.pack("<I", mat.shape[0] - 1))
            fh.write(mat.tobytes())


def load_embeddings(path, dataset: Dataset, split: str = "train") -> Dataset:
    """Attach embeddings from `path` to one split, returning a new Dataset."""
    triples = dataset.split(split)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise ParseError(f"{path}: truncated header")
        version, count, dim = struct.unpack("<III", header)
        if version != EMBED_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        if count != len(triples):
            raise SchemaError(
                f"{path}: {count} sentences in file, {len(triples)} in split {split!r}")
        out = []
        for t in triples:
            raw = fh.read(4)
            if len(raw) != 4:
                raise ParseError(f"{path}: truncated at sentence {t.sentence.id!r}")
            (tlen,) = struct.unpack("<I", raw)
            if tlen != len(t.sentence):
                raise SchemaError(
                    f"sentence {t.sentence.id!r}: file says T={tlen}, "
                    f"dataset has T={len(t.sentence)}")
            n = (tlen + 1) * dim
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise ParseError(f"{path}: truncated at sentence {t.sentence.id!r}")
            mat = np.frombuffer(payload, dtype="<f4").reshape(tlen + 1, dim)
            if not np.isfinite(mat).all():
                raise SchemaError(f"sentence {t.sentence.id!r}: non-finite embedding")
            out.append(Triple(t.sentence, t.weak, EmbeddingSequence(mat)))
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after last sentence")
    splits = dict(dataset.splits)
    splits[split] = tuple(out)
    return Dataset(dataset.label_set, splits)
