"""Synthetic weak-supervision corpora with known ground truth.

The generator samples gold label chains from a BIO-consistent transition
matrix, derives each LF's annotations from a specified true emission
matrix, and attaches label-correlated Gaussian embeddings so the neural
heads have signal to learn from.  Because every distribution is known,
trained models can be checked against the generating process.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    EmbeddingSequence,
    LabelSet,
    Sentence,
    Triple,
    WeakAnnotationMatrix,
    write_embeddings,
    write_split,
)

DEFAULT_DIAGONALS = (0.9, 0.8, 0.65, 0.5, 0.35, 0.2)


@dataclass(frozen=True)
class SynthConfig:
    entities: tuple[str, ...] = ("PER", "LOC")
    n_train: int = 2000
    n_valid: int = 300
    n_test: int = 300
    min_len: int = 8
    max_len: int = 16
    entity_density: float = 0.22
    transition: np.ndarray | None = None       # explicit (L, L) overrides density
    lf_diagonals: tuple[float, ...] = DEFAULT_DIAGONALS
    lf_emissions: np.ndarray | None = None     # explicit (K, L, L)
    confusion_lf: int = 2
    confusion_mass: float = 0.25
    confusion_entity: int = 0                  # entity whose B/I rows leak
    false_positive_scale: float = 0.06
    stray_mass: float = 0.02                   # uniform off-diagonal noise
    embed_dim: int = 32
    embed_noise: float = 0.5
    seed: int = 1234

    @property
    def label_set(self) -> LabelSet:
        return LabelSet(self.entities)

    @property
    def n_lfs(self) -> int:
        if self.lf_emissions is not None:
            return len(self.lf_emissions)
        return len(self.lf_diagonals)


def default_transition(label_set: LabelSet, entity_density: float) -> np.ndarray:
    """BIO-consistent chain: I-e is reachable only from B-e / I-e."""
    n_ent = label_set.n_entities
    n_labels = label_set.size
    p = np.zeros((n_labels, n_labels))
    p[0, 0] = 1.0 - entity_density
    for e in range(n_ent):
        p[0, 2 * e + 1] = entity_density / n_ent
    for e in range(n_ent):
        for row in (2 * e + 1, 2 * e + 2):
            stay = 0.45 if row == 2 * e + 1 else 0.35
            new_b = 0.12
            p[row, 2 * e + 2] = stay
            for e2 in range(n_ent):
                p[row, 2 * e2 + 1] += new_b / n_ent
            p[row, 0] = 1.0 - stay - new_b
    return p


def resolve_transition(cfg: SynthConfig) -> np.ndarray:
    if cfg.transition is not None:
        t = np.asarray(cfg.transition, dtype=np.float64)
        _check_transition(t, cfg.label_set)
        return t
    return default_transition(cfg.label_set, cfg.entity_density)


def _check_transition(t: np.ndarray, label_set: LabelSet) -> None:
    n_labels = label_set.size
    if t.shape != (n_labels, n_labels):
        raise ValueError("transition shape mismatch")
    if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9) or (t < 0).any():
        raise ValueError("transition rows must be stochastic")
    for j in range(n_labels):
        if label_set.entity_of(j) is None or label_set.is_begin(j):
            continue
        legal = {j, j - 1}
        for i in range(n_labels):
            if i not in legal and t[i, j] > 0:
                raise ValueError(
                    f"transition {label_set.labels[i]} -> {label_set.labels[j]} "
                    "violates BIO reachability")


def default_lf_emissions(cfg: SynthConfig) -> np.ndarray:
    """One emission matrix per LF from its diagonal reliability.

    Entity rows put the diagonal mass on the correct label, a small stray
    mass on the other entity labels, and the rest on O (a miss).  The O row
    leaks false positives at a rate growing with unreliability.  One LF
    receives a deliberate confusion block between two entity types.
    """
    label_set = cfg.label_set
    n_labels = label_set.size
    if n_labels < 5 and cfg.confusion_mass > 0:
        raise ValueError("confusion block needs at least two entity types")
    mats = np.zeros((len(cfg.lf_diagonals), n_labels, n_labels))
    for k, diag in enumerate(cfg.lf_diagonals):
        fp = cfg.false_positive_scale * (1.0 - diag)
        mats[k, 0, 0] = 1.0 - fp
        mats[k, 0, 1:] = fp / (n_labels - 1)
        for i in range(1, n_labels):
            stray = min(cfg.stray_mass, (1.0 - diag) / 2)
            others = [j for j in range(1, n_labels) if j != i]
            mats[k, i, i] = diag
            for j in others:
                mats[k, i, j] = stray / len(others)
            mats[k, i, 0] = 1.0 - diag - stray
    k = cfg.confusion_lf
    e_src = cfg.confusion_entity
    e_dst = (e_src + 1) % label_set.n_entities
    for off in (1, 2):   # B row leaks to B, I row leaks to I
        src, dst = 2 * e_src + off, 2 * e_dst + off
        shift = min(cfg.confusion_mass, mats[k, src, 0] - 0.02)
        mats[k, src, dst] += shift
        mats[k, src, 0] -= shift
    return mats


def resolve_lf_emissions(cfg: SynthConfig) -> np.ndarray:
    if cfg.lf_emissions is not None:
        mats = np.asarray(cfg.lf_emissions, dtype=np.float64)
        if not np.allclose(mats.sum(axis=2), 1.0, atol=1e-9) or (mats < 0).any():
            raise ValueError("LF emission rows must be stochastic")
        return mats
    return default_lf_emissions(cfg)


def expected_label_distribution(cfg: SynthConfig) -> np.ndarray:
    """Exact marginal over labels of a random token of a random sentence."""
    trans = resolve_transition(cfg)
    n_labels = cfg.label_set.size
    total = np.zeros(n_labels)
    lengths = range(cfg.min_len, cfg.max_len + 1)
    for t_len in lengths:
        state = np.zeros(n_labels)
        state[0] = 1.0
        acc = np.zeros(n_labels)
        for _ in range(t_len):
            state = state @ trans
            acc += state
        total += acc / t_len
    return total / len(list(lengths))


def generate_corpus(cfg: SynthConfig) -> Dataset:
    """Sample all three splits with gold labels and embeddings attached."""
    label_set = cfg.label_set
    trans = resolve_transition(cfg)
    phi_gen = resolve_lf_emissions(cfg)
    n_labels = label_set.size
    n_lfs = phi_gen.shape[0]
    rng = np.random.default_rng(cfg.seed)
    anchors = rng.normal(size=(n_labels, 2, cfg.embed_dim))
    lf_names = tuple(f"lf{k}" for k in range(n_lfs))

    trans_cdf = trans.cumsum(axis=1)
    phi_cdf = phi_gen.cumsum(axis=2)

    splits: dict[str, tuple[Triple, ...]] = {}
    for split, count in (("train", cfg.n_train), ("valid", cfg.n_valid),
                         ("test", cfg.n_test)):
        triples = []
        for m in range(count):
            t_len = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            gold = np.zeros(t_len, dtype=np.intp)
            prev = 0
            chain_u = rng.random(t_len)
            for t in range(t_len):
                prev = int(np.searchsorted(trans_cdf[prev], chain_u[t], side="right"))
                gold[t] = prev
            obs_u = rng.random((n_lfs, t_len))
            obs = np.zeros((n_lfs, t_len), dtype=np.intp)
            for k in range(n_lfs):
                rows = phi_cdf[k, gold]                       # (T, L)
                obs[k] = (obs_u[k][:, None] > rows).sum(axis=1)
            tok_emb = (anchors[gold, np.arange(t_len) % 2]
                       + cfg.embed_noise * rng.normal(size=(t_len, cfg.embed_dim)))
            vectors = np.vstack([tok_emb.mean(axis=0, keepdims=True), tok_emb])
            tokens = tuple(f"w{int(v)}" for v in rng.integers(0, 1000, size=t_len))
            triples.append(Triple(
                Sentence(f"{split}-{m}", tokens, tuple(int(i) for i in gold)),
                WeakAnnotationMatrix(lf_names, obs),
                EmbeddingSequence(vectors.astype(np.float32)),
            ))
        splits[split] = tuple(triples)
    return Dataset(label_set, splits)


def write_corpus(cfg: SynthConfig, dataset: Dataset, out_dir) -> None:
    """Persist splits in the engine's JSONL + embedding binary formats,
    plus the generating matrices for oracle comparisons."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, triples in dataset.splits.items():
        write_split(out_dir / f"{split}.jsonl", triples, dataset.label_set)
        write_embeddings(out_dir / f"{split}.bin",
                         [t.embedding.vectors for t in triples])
    truth = {
        "entities": list(cfg.entities),
        "lf_names": list(dataset.lf_names),
        "transition": resolve_transition(cfg).tolist(),
        "lf_emissions": resolve_lf_emissions(cfg).tolist(),
    }
    with open(out_dir / "phi_gen.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
