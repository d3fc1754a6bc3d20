"""The assembled label model: transition head, reliability head, scaling head.

One instance owns the three dense layers, the parameter registry used for
staged freezing and checkpointing, and (after the first training stage)
the fixed disagreement table.  Forward passes batch over sentences; the
decode path runs in mean mode and never touches the sampler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hmm
from .autodiff import Tensor
from .data import LabelSet, Triple
from .emission import (
    EmissionBundle,
    EmissionHyper,
    ReliabilityBundle,
    WxorTable,
    build_addon,
    build_concentration,
    expand_base_prior,
    predict_reliability,
    sample_emission,
)
from .nn import DenseLayer, ParamRegistry, load_checkpoint, save_checkpoint
from .transition import initial_distribution, predict_transition

MV_LF_NAME = "__mv__"


@dataclass
class Batch:
    """Padded numpy views of a list of triples."""

    e0: np.ndarray        # (B, d)
    e_tok: np.ndarray     # (B, T_max, d) zero-padded
    obs: np.ndarray       # (B, K, T_max) O-padded
    lengths: np.ndarray   # (B,)
    mask: np.ndarray      # (B, T_max) 1 for real tokens


def collate(triples: list[Triple], n_lfs: int, mv_obs: list[np.ndarray] | None = None) -> Batch:
    """Stack triples into padded arrays; `mv_obs` appends one extra LF row."""
    lengths = np.array([len(t.sentence) for t in triples], dtype=np.intp)
    t_max = int(lengths.max())
    dim = triples[0].embedding.dim
    batch = len(triples)
    e0 = np.zeros((batch, dim))
    e_tok = np.zeros((batch, t_max, dim))
    obs = np.zeros((batch, n_lfs, t_max), dtype=np.intp)
    mask = np.zeros((batch, t_max))
    for b, t in enumerate(triples):
        n = lengths[b]
        e0[b] = t.embedding.sentence_vector
        e_tok[b, :n] = t.embedding.token_vectors
        k_real = t.weak.obs.shape[0]
        obs[b, :k_real, :n] = t.weak.obs
        if mv_obs is not None:
            obs[b, k_real, :n] = mv_obs[b]
        mask[b, :n] = 1.0
    return Batch(e0=e0, e_tok=e_tok, obs=obs, lengths=lengths, mask=mask)


class LabelModel:
    def __init__(self, label_set: LabelSet, lf_names: tuple[str, ...], d_emb: int,
                 hyper: EmissionHyper, rng: np.random.Generator,
                 p0_kind: str = "delta", dirichlet_grad: str = "mean-path",
                 evidence_floor: float = hmm.api.EVIDENCE_FLOOR):
        self.label_set = label_set
        self.lf_names = tuple(lf_names)
        self.n_lfs = len(lf_names)
        self.n_labels = label_set.size
        self.d_emb = d_emb
        self.hyper = hyper.resolved(self.n_lfs, self.n_labels)
        self.p0_kind = p0_kind
        self.p0 = initial_distribution(self.n_labels, p0_kind)
        self.dirichlet_grad = dirichlet_grad
        self.evidence_floor = evidence_floor
        self.entity_map = (label_set.entity_to_label_indices()
                           if self.hyper.reliability_level == "entity" else None)

        n_slots = (label_set.n_entities + 1
                   if self.hyper.reliability_level == "entity" else self.n_labels)
        self.transition_layer = DenseLayer.init(rng, d_emb, self.n_labels ** 2)
        self.reliability_layer = DenseLayer.init(rng, d_emb, self.n_lfs * n_slots)
        self.scaling_layer = DenseLayer.init(rng, d_emb, self.n_lfs * self.n_labels)

        self.registry = ParamRegistry()
        self.registry.register_layer("transition", self.transition_layer)
        self.registry.register_layer("reliability", self.reliability_layer)
        self.registry.register_layer("scaling", self.scaling_layer)
        self.wxor: WxorTable | None = None

    # -- LF bookkeeping -------------------------------------------------------

    @property
    def has_mv_lf(self) -> bool:
        return bool(self.lf_names) and self.lf_names[-1] == MV_LF_NAME

    @property
    def n_inference_lfs(self) -> int:
        return self.n_lfs - 1 if self.has_mv_lf else self.n_lfs

    # -- state ------------------------------------------------------------------

    def set_wxor(self, table: WxorTable) -> None:
        self.wxor = table
        self.registry.register_buffer("wxor.w_tilde", table.w_tilde)
        self.registry.register_buffer("wxor.w_hat", table.w_hat)
        self.registry.register_buffer("wxor.counts", table.counts)

    def reinit_scaling(self, rng: np.random.Generator) -> None:
        fresh = DenseLayer.init(rng, self.d_emb, self.n_lfs * self.n_labels)
        self.scaling_layer.weights.data = fresh.weights.data
        self.scaling_layer.bias.data = fresh.bias.data

    def _restore_wxor_from_buffers(self) -> None:
        if self.registry.has_buffer("wxor.w_tilde"):
            self.wxor = WxorTable(
                w_hat=self.registry.buffer("wxor.w_hat"),
                w_tilde=self.registry.buffer("wxor.w_tilde"),
                counts=self.registry.buffer("wxor.counts"),
            )

    # -- forward passes ---------------------------------------------------------

    def reliability_forward(self, e0: np.ndarray) -> ReliabilityBundle:
        return predict_reliability(e0, self.reliability_layer, self.hyper,
                                   self.n_lfs, self.entity_map)

    def emission_forward(self, e0: np.ndarray, stage: int, mode: str,
                         rng: np.random.Generator | None = None,
                         ) -> tuple[EmissionBundle, ReliabilityBundle]:
        """Build (B, K, L, L) emissions; stage 1 excludes the addon prior."""
        rel = self.reliability_forward(e0)
        lam = expand_base_prior(rel.scaled, self.hyper, self.n_labels, stage)
        scale = addon = None
        if stage >= 2:
            if self.wxor is None:
                raise RuntimeError("addon prior requested before WXOR aggregation")
            scale, addon = build_addon(e0, self.scaling_layer, self.wxor.w_tilde)
        omega = build_concentration(lam, addon, self.hyper)
        phi = sample_emission(omega, mode, rng, self.dirichlet_grad)
        bundle = EmissionBundle(base_prior=lam, scale=scale, addon_prior=addon,
                                concentration=omega, emission=phi)
        return bundle, rel

    def transition_forward(self, e_tok: np.ndarray) -> Tensor:
        return predict_transition(e_tok, self.transition_layer, self.n_labels)

    # -- inference ----------------------------------------------------------------

    def inference_stage(self) -> int:
        return 3 if self.wxor is not None else 1

    def decode(self, triples, batch_size: int = 256,
               n_threads: int = 1) -> list[np.ndarray]:
        """Viterbi label sequences in mean mode, excluding any MV pseudo-LF.

        With n_threads > 1 the per-sentence decodes run on a worker pool;
        results keep corpus order either way.
        """
        out: list[np.ndarray] = []
        stage = self.inference_stage()
        k_inf = self.n_inference_lfs
        for start in range(0, len(triples), batch_size):
            chunk = list(triples[start:start + batch_size])
            batch = collate(chunk, k_inf)
            bundle, _ = self.emission_forward(batch.e0, stage, "mean")
            psi = self.transition_forward(batch.e_tok)
            log_ev = hmm.emission_evidence(
                _slice_lfs(bundle.emission, k_inf), batch.obs,
                floor=self.evidence_floor)
            jobs = [(psi.data[b, :n], log_ev.data[b, :n])
                    for b, n in enumerate(batch.lengths)]
            if n_threads > 1:
                from concurrent.futures import ThreadPoolExecutor
                with ThreadPoolExecutor(n_threads) as pool:
                    out.extend(pool.map(
                        lambda job: hmm.viterbi(job[0], job[1], self.p0)[0], jobs))
            else:
                out.extend(hmm.viterbi(p, e, self.p0)[0] for p, e in jobs)
        return out

    def mean_reliability(self, triples, batch_size: int = 512) -> np.ndarray:
        """Corpus-mean reliability scores, (K, L)."""
        total = np.zeros((self.n_lfs, self.n_labels))
        count = 0
        for start in range(0, len(triples), batch_size):
            chunk = list(triples[start:start + batch_size])
            e0 = np.stack([t.embedding.sentence_vector for t in chunk]).astype(np.float64)
            rel = self.reliability_forward(e0)
            total += rel.scaled.data.sum(axis=0)
            count += len(chunk)
        return total / count

    def mean_emission(self, triples, stage: int, batch_size: int = 512) -> np.ndarray:
        """Corpus-mean mean-mode emission, (K, L, L)."""
        total = np.zeros((self.n_lfs, self.n_labels, self.n_labels))
        count = 0
        for start in range(0, len(triples), batch_size):
            chunk = list(triples[start:start + batch_size])
            e0 = np.stack([t.embedding.sentence_vector for t in chunk]).astype(np.float64)
            bundle, _ = self.emission_forward(e0, stage, "mean")
            total += bundle.emission.data.sum(axis=0)
            count += len(chunk)
        return total / count

    # -- persistence ---------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "entities": list(self.label_set.entities),
            "lf_names": list(self.lf_names),
            "d_emb": self.d_emb,
            "p0_kind": self.p0_kind,
            "dirichlet_grad": self.dirichlet_grad,
            "evidence_floor": self.evidence_floor,
            "hyper": {
                "h_n": self.hyper.h_n, "h_s": self.hyper.h_s, "h_r": self.hyper.h_r,
                "g_n": self.hyper.g_n, "g_r_s1": self.hyper.g_r_s1,
                "g_r_s23": self.hyper.g_r_s23,
                "nu_base": self.hyper.nu_base, "nu_expan": self.hyper.nu_expan,
                "reliability_level": self.hyper.reliability_level,
            },
        }

    def save(self, out_dir, checkpoint_name: str = "model.scmp",
             optimizer=None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "model.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2)
        save_checkpoint(out_dir / checkpoint_name, self.registry, optimizer)
        # saving rounds the registry to serialized precision; keep the live
        # disagreement table in step so post-save and reloaded runs agree
        self._restore_wxor_from_buffers()

    @classmethod
    def load(cls, model_dir, checkpoint_name: str = "model.scmp") -> "LabelModel":
        model_dir = Path(model_dir)
        with open(model_dir / "model.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        hyper = EmissionHyper(**manifest["hyper"])
        model = cls(
            LabelSet(tuple(manifest["entities"])), tuple(manifest["lf_names"]),
            manifest["d_emb"], hyper, np.random.default_rng(0),
            p0_kind=manifest["p0_kind"], dirichlet_grad=manifest["dirichlet_grad"],
            evidence_floor=manifest["evidence_floor"])
        load_checkpoint(model_dir / checkpoint_name, model.registry)
        model._restore_wxor_from_buffers()
        return model


def _slice_lfs(phi: Tensor, k: int) -> Tensor:
    return phi if phi.shape[1] == k else phi[:, :k]
