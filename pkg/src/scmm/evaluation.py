"""Baselines and metrics: majority voting, entity-level micro P/R/F1,
Pearson correlation, and the per-LF reliability report.

Span semantics follow the conll convention: a chunk starts at B-e or at an
I-e that does not continue a same-type chunk, and scoring is exact match
on (start, end, type).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabelSet, Triple


@dataclass(frozen=True)
class EntitySpan:
    start: int           # token index, inclusive
    end: int             # token index, exclusive
    entity: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError("span must satisfy 0 <= start < end")


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predicted: int
    gold: int
    per_entity: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "true_positives": self.true_positives, "predicted": self.predicted,
            "gold": self.gold, "per_entity": self.per_entity,
        }


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def majority_vote(obs: np.ndarray, rng: np.random.Generator, n_labels: int,
                  count_abstain: bool = False) -> np.ndarray:
    """Per-token plurality over the LF observations.

    Abstains (O) are ignored unless count_abstain is set; a token no LF
    annotated falls back to O.  Ties draw uniformly from the tied labels.
    """
    n_tok = obs.shape[1]
    out = np.zeros(n_tok, dtype=np.intp)
    for t in range(n_tok):
        counts = np.bincount(obs[:, t], minlength=n_labels)
        if not count_abstain:
            counts[0] = 0
        top = counts.max()
        if top == 0:
            continue
        tied = np.flatnonzero(counts == top)
        out[t] = tied[0] if len(tied) == 1 else tied[rng.integers(len(tied))]
    return out


def decode_entities(seq, label_set: LabelSet) -> list[EntitySpan]:
    spans: list[EntitySpan] = []
    start = None
    current: int | None = None
    for pos, idx in enumerate(seq):
        ent = label_set.entity_of(idx)
        begins = label_set.is_begin(idx)
        if ent is None:
            if current is not None:
                spans.append(EntitySpan(start, pos, label_set.entities[current]))
                current = None
        elif begins or ent != current:
            if current is not None:
                spans.append(EntitySpan(start, pos, label_set.entities[current]))
            start, current = pos, ent
    if current is not None:
        spans.append(EntitySpan(start, len(seq), label_set.entities[current]))
    return spans


def encode_spans(spans, n_tokens: int, label_set: LabelSet) -> np.ndarray:
    """Inverse of decode_entities for non-overlapping spans."""
    out = np.zeros(n_tokens, dtype=np.intp)
    for span in spans:
        ent = label_set.entities.index(span.entity)
        out[span.start] = 2 * ent + 1
        out[span.start + 1:span.end] = 2 * ent + 2
    return out


def entity_prf(gold_seqs, pred_seqs, label_set: LabelSet) -> MetricReport:
    """Micro-averaged exact-match span scores over a corpus."""
    if len(gold_seqs) != len(pred_seqs):
        raise ValueError("gold and prediction corpus sizes differ")
    tp_total = pred_total = gold_total = 0
    per_ent = {e: {"tp": 0, "pred": 0, "gold": 0} for e in label_set.entities}
    for gold, pred in zip(gold_seqs, pred_seqs):
        if len(gold) != len(pred):
            raise ValueError("sentence length mismatch between gold and prediction")
        gset = set((s.start, s.end, s.entity) for s in decode_entities(gold, label_set))
        pset = set((s.start, s.end, s.entity) for s in decode_entities(pred, label_set))
        for s in gset:
            per_ent[s[2]]["gold"] += 1
        for s in pset:
            per_ent[s[2]]["pred"] += 1
        for s in gset & pset:
            per_ent[s[2]]["tp"] += 1
        tp_total += len(gset & pset)
        pred_total += len(pset)
        gold_total += len(gset)
    p, r, f1 = _prf(tp_total, pred_total, gold_total)
    breakdown = {}
    for ent, c in per_ent.items():
        ep, er, ef = _prf(c["tp"], c["pred"], c["gold"])
        breakdown[ent] = {"precision": ep, "recall": er, "f1": ef, **c}
    return MetricReport(p, r, f1, tp_total, pred_total, gold_total, breakdown)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("pearson needs two equal-length vectors of size >= 2")
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da ** 2).sum(), (db ** 2).sum()
    if va == 0.0 or vb == 0.0:
        raise ValueError("correlation undefined: zero variance")
    return float((da * db).sum() / np.sqrt(va * vb))


def lf_metrics(triples: list[Triple], label_set: LabelSet) -> list[MetricReport]:
    """Each LF's own annotations scored as predictions against gold."""
    golds = [t.sentence.gold for t in triples]
    if any(g is None for g in golds):
        raise ValueError("LF metrics need gold labels")
    n_lfs = triples[0].weak.n_lfs
    return [
        entity_prf(golds, [t.weak.obs[k] for t in triples], label_set)
        for k in range(n_lfs)
    ]


def reliability_report(model, triples: list[Triple]) -> dict:
    """Predicted reliabilities next to true LF scores, with their correlation.

    The overall reliability of an LF is its mean score over the entity
    labels (the O column is reported separately); the correlation pairs
    that vector with the LFs' entity F1.
    """
    label_set: LabelSet = model.label_set
    k_real = model.n_inference_lfs
    if k_real < 2:
        raise ValueError("reliability correlation needs at least 2 LFs")
    if any(t.sentence.gold is None for t in triples):
        raise ValueError("reliability report needs gold labels")
    mean_rel = model.mean_reliability(triples)        # (K, L)
    reports = lf_metrics(triples, label_set)
    rows = []
    overall = []
    for k in range(k_real):
        per_entity = {
            ent: float((mean_rel[k, 2 * i + 1] + mean_rel[k, 2 * i + 2]) / 2)
            for i, ent in enumerate(label_set.entities)
        }
        score = float(mean_rel[k, 1:].mean())
        overall.append(score)
        rows.append({
            "name": model.lf_names[k],
            "reliability": score,
            "reliability_o": float(mean_rel[k, 0]),
            "reliability_per_entity": per_entity,
            "precision": reports[k].precision,
            "recall": reports[k].recall,
            "f1": reports[k].f1,
        })
    report = {
        "split_size": len(triples),
        "lfs": rows,
        "pearson_r": pearson(overall, [rep.f1 for rep in reports[:k_real]]),
    }
    if model.wxor is not None:
        report["wxor"] = {
            "w_hat": model.wxor.w_hat.tolist(),
            "w_tilde": model.wxor.w_tilde.tolist(),
            "counts": model.wxor.counts.tolist(),
        }
    return report


def reliability_table_csv(report: dict) -> str:
    """Flatten the per-LF rows to CSV for plotting."""
    entities = sorted(report["lfs"][0]["reliability_per_entity"]) if report["lfs"] else []
    header = ["name", "reliability", "reliability_o",
              *(f"reliability_{e}" for e in entities),
              "precision", "recall", "f1"]
    lines = [",".join(header)]
    for row in report["lfs"]:
        cells = [row["name"], f"{row['reliability']:.6f}",
                 f"{row['reliability_o']:.6f}",
                 *(f"{row['reliability_per_entity'][e]:.6f}" for e in entities),
                 f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                 f"{row['f1']:.6f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
