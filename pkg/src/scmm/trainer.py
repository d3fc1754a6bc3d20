"""Training orchestration: observation-statistics init, MSE pretraining,
and the three-stage generalized EM pipeline with per-stage freezing.

Stage 1 fits the transition and reliability heads with the addon prior
disabled.  The disagreement table is then aggregated once, stage 2 fits
only the scaling head against it, and stage 3 fine-tunes the transition
with the whole emission path frozen.  Model selection inside every stage
is validation entity F1 via mean-mode Viterbi decoding.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmm
from .autodiff import Tensor, maximum
from .data import Dataset, LabelSet
from .emission import EmissionHyper, wxor_aggregate
from .evaluation import entity_prf, majority_vote, reliability_report
from .model import MV_LF_NAME, Batch, LabelModel, collate
from .nn import Adam, backprop, save_checkpoint

STAGE_TAGS = ("pre1", "s1", "pre2", "s2", "s3")


@dataclass(frozen=True)
class StageConfig:
    lr: float
    max_epochs: int = 50
    patience: int = 5
    sample: bool = True


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    lr_pretrain: float = 5e-4
    pretrain_epochs: int = 25
    stage1: StageConfig = StageConfig(lr=2e-4)
    stage2: StageConfig = StageConfig(lr=4e-5)
    stage3: StageConfig = StageConfig(lr=2e-4, sample=False)
    lambda_mix: float = 0.2
    use_mv: bool = False
    count_o_votes: bool = False
    wxor_scope: str = "train+valid"
    dirichlet_mode: str = "mean-path"
    eval_split: str = "valid"
    p0: str = "delta"
    optimizer: str = "adam"
    evidence_floor: float = 1e-30
    hyper: EmissionHyper = field(default_factory=EmissionHyper)

    def __post_init__(self):
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError("lambda_mix must lie in [0,1]")
        if self.wxor_scope not in ("train+valid", "valid"):
            raise ValueError("wxor_scope must be 'train+valid' or 'valid'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        for sc in (self.stage1, self.stage2, self.stage3):
            if sc.lr <= 0 or self.lr_pretrain <= 0:
                raise ValueError("learning rates must be positive")
            if sc.patience < 1:
                raise ValueError("patience must be >= 1")


@dataclass
class InitStats:
    psi_star: np.ndarray                 # (L, L)
    phi_star: np.ndarray                 # (K, L, L)
    phi_prime: np.ndarray | None = None  # (K, L, L) stage-2 target
    phi_true: np.ndarray | None = None   # (K, L, L) gold-conditioned, diagnostic


@dataclass
class Checkpoint:
    """In-memory snapshot of the best state seen within a training phase."""

    stage: str                           # one of STAGE_TAGS
    state: dict[str, np.ndarray]
    best_f1: float
    epoch: int

    def meta(self) -> dict[str, float]:
        return {"stage_index": float(STAGE_TAGS.index(self.stage)),
                "best_f1": self.best_f1, "epoch": float(self.epoch)}


@dataclass
class TrainReport:
    stage_f1: dict[str, float]
    metrics: list[dict]
    reliability: dict | None
    init_stats: InitStats


STAGE_HEADS = {
    1: ("transition.", "reliability."),
    2: ("scaling.",),
    3: ("transition.",),
}


def compute_init_stats(triples, label_set: LabelSet, n_lfs: int,
                       mv_seqs: list[np.ndarray],
                       mv_as_lf: bool = False) -> InitStats:
    """Transition/emission statistics from majority-vote pseudo-labels,
    add-one smoothed and row-normalized."""
    if not triples:
        raise ValueError("empty split")
    n_labels = label_set.size
    psi_counts = np.ones((n_labels, n_labels))
    phi_counts = np.ones((n_lfs, n_labels, n_labels))
    for triple, pseudo in zip(triples, mv_seqs):
        np.add.at(psi_counts, (pseudo[:-1], pseudo[1:]), 1.0)
        obs = triple.weak.obs
        k_real = obs.shape[0]
        for k in range(k_real):
            np.add.at(phi_counts, (k, pseudo, obs[k]), 1.0)
        if mv_as_lf:
            np.add.at(phi_counts, (k_real, pseudo, pseudo), 1.0)
    psi_star = psi_counts / psi_counts.sum(axis=1, keepdims=True)
    phi_star = phi_counts / phi_counts.sum(axis=2, keepdims=True)
    return InitStats(psi_star=psi_star, phi_star=phi_star)


def true_emission_stats(triples, label_set: LabelSet) -> np.ndarray:
    """Per-LF emission statistics conditioned on gold labels.

    Latent labels never seen in gold yield a delta-on-O row.  Diagnostic
    only; training never reads this.
    """
    if not triples:
        raise ValueError("empty split")
    if any(t.sentence.gold is None for t in triples):
        raise ValueError("true emission statistics need gold labels")
    n_labels = label_set.size
    n_lfs = triples[0].weak.n_lfs
    counts = np.zeros((n_lfs, n_labels, n_labels))
    for t in triples:
        gold = np.asarray(t.sentence.gold, dtype=np.intp)
        for k in range(n_lfs):
            np.add.at(counts, (k, gold, t.weak.obs[k]), 1.0)
    totals = counts.sum(axis=2, keepdims=True)
    out = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    empty = totals[:, :, 0] == 0
    out[empty, 0] = 1.0
    return out


def gem_step(model: LabelModel, triples, stage: int, lr: float,
             batch_rng: np.random.Generator | None = None,
             sample: bool = False, optimizer: str = "sgd",
             trainable=None) -> float:
    """One full-batch E-step + M-step; returns the pre-step log likelihood."""
    model.registry.set_trainable(trainable or STAGE_HEADS[stage])
    opt = Adam(model.registry, lr, plain_sgd=(optimizer == "sgd"))
    batch = collate(list(triples), model.n_lfs)
    loss, q_mean, log_z = _em_objective(model, batch, stage,
                                        "sample" if sample else "mean", batch_rng)
    opt.step(backprop(loss, model.registry))
    return log_z


def batch_log_likelihood(model: LabelModel, triples, stage: int) -> float:
    """Mean-mode observation log likelihood summed over a batch."""
    batch = collate(list(triples), model.n_lfs)
    bundle, _ = model.emission_forward(batch.e0, stage, "mean")
    psi = model.transition_forward(batch.e_tok)
    log_ev = hmm.emission_evidence(bundle.emission, batch.obs,
                                   floor=model.evidence_floor)
    total = 0.0
    for b, n in enumerate(batch.lengths):
        stats = hmm.forward_backward(psi.data[b, :n], log_ev.data[b, :n],
                                     model.p0, with_q=False)
        total += stats.log_z
    return total


def _em_objective(model: LabelModel, batch: Batch, stage: int, mode: str,
                  rng: np.random.Generator | None):
    """Forward pass + detached E-step; returns (-Q/B tape loss, Q/B, sum logZ)."""
    bundle, _ = model.emission_forward(batch.e0, stage, mode, rng)
    psi = model.transition_forward(batch.e_tok)
    log_ev = hmm.emission_evidence(bundle.emission, batch.obs,
                                   floor=model.evidence_floor)
    n_batch, t_max = batch.mask.shape
    n_labels = model.n_labels
    gamma_pad = np.zeros((n_batch, t_max, n_labels))
    xi_pad = np.zeros((n_batch, t_max, n_labels, n_labels))
    q_old = 0.0
    log_z = 0.0
    for b, n in enumerate(batch.lengths):
        stats = hmm.forward_backward(psi.data[b, :n], log_ev.data[b, :n], model.p0)
        gamma_pad[b, :n] = stats.gamma[1:]
        xi_pad[b, :n] = stats.xi
        q_old += stats.q
        log_z += stats.log_z
    log_psi = maximum(psi, 1e-300).log()
    q = (Tensor(xi_pad) * log_psi).sum() + (Tensor(gamma_pad) * log_ev).sum()
    loss = -q * (1.0 / n_batch)
    return loss, q_old / n_batch, log_z


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig,
                 out_dir=None):
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.label_set = dataset.label_set

        train = dataset.split("train")
        if not train:
            raise ValueError("empty train split")
        for name in ("train", config.eval_split):
            for t in dataset.split(name):
                if t.embedding is None:
                    raise ValueError(f"split {name!r} is missing embeddings")
        if any(t.sentence.gold is None for t in dataset.split(config.eval_split)):
            raise ValueError(
                f"eval split {config.eval_split!r} needs gold labels for early stopping")

        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self._init_rng = np.random.default_rng(seeds[0])
        self._mv_rng = np.random.default_rng(seeds[1])
        self._sample_rng = np.random.default_rng(seeds[2])
        self._shuffle_rng = np.random.default_rng(seeds[3])

        lf_names = dataset.lf_names
        if config.use_mv:
            lf_names = lf_names + (MV_LF_NAME,)
        self.model = LabelModel(
            self.label_set, lf_names, train[0].embedding.dim, config.hyper,
            self._init_rng, p0_kind=config.p0, dirichlet_grad=config.dirichlet_mode,
            evidence_floor=config.evidence_floor)

        # majority-vote pseudo-labels over the real LFs, reused as the
        # training-only extra LF and for the init statistics
        self.mv_train = [
            majority_vote(t.weak.obs, self._mv_rng, self.label_set.size,
                          config.count_o_votes)
            for t in train
        ]
        self.metrics: list[dict] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "metrics.jsonl").write_text("")

    # -- plumbing ---------------------------------------------------------------

    def _log(self, entry: dict) -> None:
        self.metrics.append(entry)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")

    def _train_batches(self, shuffle: bool = True):
        train = self.dataset.split("train")
        idx = np.arange(len(train))
        if shuffle:
            self._shuffle_rng.shuffle(idx)
        bs = self.config.batch_size
        for start in range(0, len(idx), bs):
            chosen = idx[start:start + bs]
            triples = [train[i] for i in chosen]
            mv = [self.mv_train[i] for i in chosen] if self.config.use_mv else None
            yield collate(triples, self.model.n_lfs, mv)

    def _validate(self) -> tuple[float, float, float]:
        triples = self.dataset.split(self.config.eval_split)
        preds = self.model.decode(triples)
        golds = [t.sentence.gold for t in triples]
        rep = entity_prf(golds, preds, self.label_set)
        return rep.precision, rep.recall, rep.f1

    def _save_stage(self, tag: str, optimizer: Adam | None,
                    best: Checkpoint | None = None) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / f"{tag}.scmp", self.model.registry,
                            optimizer, meta=best.meta() if best else None)
            self.model._restore_wxor_from_buffers()

    # -- stages -------------------------------------------------------------------

    def compute_init_stats(self) -> InitStats:
        return compute_init_stats(
            self.dataset.split("train"), self.label_set, self.model.n_lfs,
            self.mv_train, mv_as_lf=self.config.use_mv)

    def pretrain(self, stage: int, stats: InitStats) -> None:
        """Fit heads to the target matrices by MSE in mean mode."""
        cfg = self.config
        if stage == 1:
            self.model.registry.set_trainable(("transition.", "reliability."))
            target = stats.phi_star
        else:
            if stats.phi_prime is None:
                raise ValueError("stage-2 pretraining needs the mixed target")
            self.model.reinit_scaling(self._init_rng)
            self.model.registry.set_trainable(("scaling.",))
            target = stats.phi_prime
        optimizer = Adam(self.model.registry, cfg.lr_pretrain,
                         plain_sgd=(cfg.optimizer == "sgd"))
        psi_target = Tensor(stats.psi_star)
        phi_target = Tensor(target)
        for epoch in range(cfg.pretrain_epochs):
            t0 = time.perf_counter()
            total = 0.0
            n_sent = 0
            for batch in self._train_batches():
                n_batch = len(batch.lengths)
                bundle, _ = self.model.emission_forward(batch.e0, stage, "mean")
                diff = bundle.emission - phi_target
                loss = (diff * diff).sum() * (1.0 / (self.model.n_lfs * n_batch))
                if stage == 1:
                    psi = self.model.transition_forward(batch.e_tok)
                    d = psi - psi_target
                    w = batch.mask / batch.lengths[:, None]
                    loss = loss + (Tensor(w) * (d * d).sum(axis=(-2, -1))).sum() * (1.0 / n_batch)
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(f"pretraining diverged at stage {stage}")
                optimizer.step(backprop(loss, self.model.registry))
                total += value * n_batch
                n_sent += n_batch
            vp, vr, vf1 = self._validate()
            self._log({"stage": f"pre{stage}", "epoch": epoch,
                       "q_mean": -total / n_sent, "valid_p": vp, "valid_r": vr,
                       "valid_f1": vf1,
                       "seconds": round(time.perf_counter() - t0, 3)})
        self._save_stage(f"pre{stage}", optimizer)

    def em_stage(self, stage: int) -> float:
        """Generalized EM over minibatches; returns the stage's best valid F1."""
        cfg = self.config
        stage_cfg = {1: cfg.stage1, 2: cfg.stage2, 3: cfg.stage3}[stage]
        self.model.registry.set_trainable(STAGE_HEADS[stage])
        optimizer = Adam(self.model.registry, stage_cfg.lr,
                         plain_sgd=(cfg.optimizer == "sgd"))
        mode = "sample" if stage_cfg.sample else "mean"
        best: Checkpoint | None = None
        stale = 0
        for epoch in range(stage_cfg.max_epochs):
            t0 = time.perf_counter()
            q_total = 0.0
            n_sent = 0
            for batch in self._train_batches():
                loss, q_mean, _ = _em_objective(
                    self.model, batch, stage, mode, self._sample_rng)
                if not np.isfinite(loss.item()):
                    raise RuntimeError(f"non-finite objective in stage {stage}")
                optimizer.step(backprop(loss, self.model.registry))
                q_total += q_mean * len(batch.lengths)
                n_sent += len(batch.lengths)
            vp, vr, vf1 = self._validate()
            self._log({"stage": f"s{stage}", "epoch": epoch,
                       "q_mean": q_total / n_sent, "valid_p": vp, "valid_r": vr,
                       "valid_f1": vf1,
                       "seconds": round(time.perf_counter() - t0, 3)})
            if best is None or vf1 > best.best_f1:
                best = Checkpoint(f"s{stage}", self.model.registry.state(),
                                  vf1, epoch)
                stale = 0
            else:
                stale += 1
                if stale >= stage_cfg.patience:
                    break
        self.model.registry.load_state(best.state)
        self._save_stage(f"s{stage}", optimizer, best)
        return best.best_f1

    def aggregate_wxor(self) -> None:
        """Build the disagreement table once, after stage 1."""
        cfg = self.config
        scopes = ("train", "valid") if cfg.wxor_scope == "train+valid" else ("valid",)
        def sentences():
            for split in scopes:
                triples = self.dataset.split(split)
                mv = (self.mv_train if (split == "train" and cfg.use_mv) else None)
                for start in range(0, len(triples), 512):
                    chunk = list(triples[start:start + 512])
                    chunk_mv = (mv[start:start + 512] if mv is not None else None)
                    batch = collate(chunk, self.model.n_lfs, chunk_mv)
                    rel = self.model.reliability_forward(batch.e0)
                    for b, n in enumerate(batch.lengths):
                        yield batch.obs[b, :, :n], rel.scaled.data[b]
        self.model.set_wxor(wxor_aggregate(sentences(), self.label_set.size))

    def build_phi_prime(self, stats: InitStats) -> InitStats:
        """Mix observation statistics with the stage-1 corpus-mean emission."""
        lam = self.config.lambda_mix
        phi_mean = self.model.mean_emission(self.dataset.split("train"), stage=1)
        stats.phi_prime = lam * stats.phi_star + (1 - lam) * phi_mean
        return stats

    # -- pipeline -------------------------------------------------------------------

    def train(self) -> tuple[LabelModel, TrainReport]:
        stats = self.compute_init_stats()
        gold_train = all(t.sentence.gold is not None
                         for t in self.dataset.split("train"))
        if gold_train:
            stats.phi_true = true_emission_stats(
                self.dataset.split("train"), self.label_set)

        self.pretrain(1, stats)
        f1_s1 = self.em_stage(1)
        self.aggregate_wxor()
        stats = self.build_phi_prime(stats)
        self.pretrain(2, stats)
        f1_s2 = self.em_stage(2)
        f1_s3 = self.em_stage(3)

        reliability = None
        eval_triples = self.dataset.split(self.config.eval_split)
        if (self.model.n_inference_lfs >= 2
                and all(t.sentence.gold is not None for t in eval_triples)):
            reliability = reliability_report(self.model, list(eval_triples))
        report = TrainReport(
            stage_f1={"s1": f1_s1, "s2": f1_s2, "s3": f1_s3},
            metrics=self.metrics,
            reliability=reliability,
            init_stats=stats,
        )
        if self.out_dir is not None:
            self.model.save(self.out_dir)
            if reliability is not None:
                with open(self.out_dir / "reliability_report.json", "w",
                          encoding="utf-8") as fh:
                    json.dump(reliability, fh, indent=2)
        return self.model, report


def train(dataset: Dataset, config: TrainConfig, out_dir=None):
    """Run the full pipeline; returns (model, report)."""
    return Trainer(dataset, config, out_dir).train()
