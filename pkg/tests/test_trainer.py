import json

import numpy as np
import pytest

from scmm.data import LabelSet, Sentence, Triple, WeakAnnotationMatrix
from scmm.emission import EmissionHyper
from scmm.evaluation import majority_vote
from scmm.model import MV_LF_NAME, LabelModel
from scmm.synth import SynthConfig, generate_corpus
from scmm.trainer import (
    StageConfig,
    TrainConfig,
    Trainer,
    batch_log_likelihood,
    compute_init_stats,
    gem_step,
    true_emission_stats,
)

from helpers import tiny_corpus, tiny_train_config


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus()


def hand_triples(ls):
    ann = WeakAnnotationMatrix(("lf0", "lf1"), np.array([[1, 2, 0], [0, 2, 0]]))
    s1 = Triple(Sentence("a", ("x", "y", "z")), ann)
    ann2 = WeakAnnotationMatrix(("lf0", "lf1"), np.array([[0, 0], [3, 0]]))
    s2 = Triple(Sentence("b", ("u", "v")), ann2)
    return [s1, s2]


# -- init statistics ---------------------------------------------------------------

def test_init_stats_hand_tally():
    ls = LabelSet(("PER", "LOC"))
    triples = hand_triples(ls)
    mv = [np.array([1, 2, 0]), np.array([3, 0])]
    stats = compute_init_stats(triples, ls, 2, mv)
    # transition counts: (1->2), (2->0), (3->0) on top of add-one smoothing
    want = np.ones((5, 5))
    want[1, 2] += 1
    want[2, 0] += 1
    want[3, 0] += 1
    want /= want.sum(axis=1, keepdims=True)
    assert np.allclose(stats.psi_star, want, atol=1e-12)
    # emission counts for lf0: pseudo 1 -> obs 1, pseudo 2 -> obs 2,
    # pseudo 0 -> obs 0 (x2), pseudo 3 -> obs 0
    want_phi = np.ones((5, 5))
    want_phi[1, 1] += 1
    want_phi[2, 2] += 1
    want_phi[0, 0] += 2
    want_phi[3, 0] += 1
    want_phi /= want_phi.sum(axis=1, keepdims=True)
    assert np.allclose(stats.phi_star[0], want_phi, atol=1e-12)


def test_init_stats_no_zero_rows():
    ls = LabelSet(("PER", "LOC"))
    triples = hand_triples(ls)
    mv = [np.zeros(3, dtype=np.intp), np.zeros(2, dtype=np.intp)]
    stats = compute_init_stats(triples, ls, 2, mv)
    assert (stats.psi_star > 0).all()
    assert (stats.phi_star > 0).all()
    assert np.allclose(stats.psi_star.sum(axis=1), 1.0)
    assert np.allclose(stats.phi_star.sum(axis=2), 1.0)


def test_init_stats_empty_split():
    with pytest.raises(ValueError, match="empty"):
        compute_init_stats([], LabelSet(("PER",)), 1, [])


# -- true emission statistics --------------------------------------------------------

def test_true_emission_identity_lf():
    ls = LabelSet(("PER", "LOC"))
    gold = (0, 1, 2, 3, 4, 0)
    obs = np.array([list(gold)])
    t = Triple(Sentence("s", tuple("abcdef"), gold),
               WeakAnnotationMatrix(("copy",), obs))
    phi = true_emission_stats([t], ls)
    assert np.allclose(phi[0], np.eye(5))


def test_true_emission_abstainer():
    ls = LabelSet(("PER", "LOC"))
    gold = (0, 1, 2, 3)
    t = Triple(Sentence("s", tuple("abcd"), gold),
               WeakAnnotationMatrix(("lazy",), np.zeros((1, 4), dtype=np.intp)))
    phi = true_emission_stats([t], ls)
    assert np.allclose(phi[0][:, 0], 1.0)  # unseen latent rows default to O too


def test_true_emission_requires_gold():
    ls = LabelSet(("PER",))
    t = Triple(Sentence("s", ("a",)), WeakAnnotationMatrix(("lf",), np.zeros((1, 1), int)))
    with pytest.raises(ValueError, match="gold"):
        true_emission_stats([t], ls)


# -- pretraining -----------------------------------------------------------------------

def test_pretrain_loss_decreases(corpus):
    tc = tiny_train_config(pretrain_epochs=6)
    tr = Trainer(corpus, tc)
    stats = tr.compute_init_stats()
    tr.pretrain(1, stats)
    losses = [-m["q_mean"] for m in tr.metrics if m["stage"] == "pre1"]
    assert len(losses) == 6
    assert losses[-1] <= losses[0] + 1e-8
    assert all(b <= a + 1e-8 for a, b in zip(losses, losses[1:]))


def test_pretrain_transition_term_zero_at_uniform_target(corpus):
    # zero-initialized transition head emits uniform rows, so a uniform
    # target contributes nothing to the initial loss
    tc = tiny_train_config(pretrain_epochs=1)
    tr = Trainer(corpus, tc)
    tr.model.transition_layer.weights.data[:] = 0.0
    tr.model.transition_layer.bias.data[:] = 0.0
    stats = tr.compute_init_stats()
    L = corpus.label_set.size
    stats.psi_star = np.full((L, L), 1.0 / L)

    from scmm.model import collate
    from scmm.autodiff import Tensor
    batch = collate(list(corpus.split("train"))[:8], tr.model.n_lfs)
    psi = tr.model.transition_forward(batch.e_tok)
    d = psi - Tensor(stats.psi_star)
    w = batch.mask / batch.lengths[:, None]
    term = (Tensor(w) * (d * d).sum(axis=(-2, -1))).sum().item()
    assert term == pytest.approx(0.0, abs=1e-18)


def test_phi_prime_mixing_boundary(corpus):
    tc = tiny_train_config(lambda_mix=1.0)
    tr = Trainer(corpus, tc)
    stats = tr.compute_init_stats()
    stats = tr.build_phi_prime(stats)
    assert np.array_equal(stats.phi_prime, stats.phi_star)


def test_stage2_pretrain_needs_target(corpus):
    tr = Trainer(corpus, tiny_train_config())
    stats = tr.compute_init_stats()
    with pytest.raises(ValueError, match="target"):
        tr.pretrain(2, stats)


# -- stage freezing ----------------------------------------------------------------------

def test_stage_freeze_masks_exact(corpus):
    tc = tiny_train_config(pretrain_epochs=1,
                           stage1=StageConfig(lr=1e-3, max_epochs=1, patience=1),
                           stage2=StageConfig(lr=1e-3, max_epochs=1, patience=1),
                           stage3=StageConfig(lr=1e-3, max_epochs=1, patience=1,
                                              sample=False))
    tr = Trainer(corpus, tc)
    stats = tr.compute_init_stats()
    tr.pretrain(1, stats)

    def snapshot():
        return {n: tr.model.registry.tensor(n).data.copy()
                for n in tr.model.registry.names}

    before = snapshot()
    tr.em_stage(1)
    after = snapshot()
    changed = {n for n in before if not np.array_equal(before[n], after[n])}
    assert changed == {"transition.weight", "transition.bias",
                       "reliability.weight", "reliability.bias"}

    tr.aggregate_wxor()
    stats = tr.build_phi_prime(stats)
    tr.pretrain(2, stats)
    before = snapshot()
    tr.em_stage(2)
    after = snapshot()
    changed = {n for n in before if not np.array_equal(before[n], after[n])}
    assert changed == {"scaling.weight", "scaling.bias"}

    before = snapshot()
    tr.em_stage(3)
    after = snapshot()
    changed = {n for n in before if not np.array_equal(before[n], after[n])}
    assert changed == {"transition.weight", "transition.bias"}


def test_stage1_has_no_addon(corpus):
    # during stage 1 the concentration is exactly expan * base + base_floor
    tr = Trainer(corpus, tiny_train_config())
    model = tr.model
    e0 = np.stack([t.embedding.sentence_vector
                   for t in corpus.split("train")[:4]]).astype(np.float64)
    bundle, _ = model.emission_forward(e0, stage=1, mode="mean")
    hyper = model.hyper
    recon = hyper.nu_expan * bundle.base_prior.data + hyper.nu_base
    assert bundle.addon_prior is None
    assert np.allclose(bundle.concentration.data, recon, atol=1e-12)


def test_stage2_requires_wxor(corpus):
    tr = Trainer(corpus, tiny_train_config())
    e0 = np.zeros((1, corpus.split("train")[0].embedding.dim))
    with pytest.raises(RuntimeError, match="WXOR"):
        tr.model.emission_forward(e0, stage=2, mode="mean")


# -- MV pseudo-LF ----------------------------------------------------------------------

def test_use_mv_adds_training_lf(corpus):
    tr = Trainer(corpus, tiny_train_config(use_mv=True))
    k_real = len(corpus.lf_names)
    assert tr.model.n_lfs == k_real + 1
    assert tr.model.n_inference_lfs == k_real
    assert tr.model.lf_names[-1] == MV_LF_NAME
    batch = next(tr._train_batches(shuffle=False))
    assert batch.obs.shape[1] == k_real + 1
    # the appended row equals majority voting over the real LFs
    first = corpus.split("train")[0]
    expect = tr.mv_train[0]
    assert np.array_equal(batch.obs[0, k_real, :len(first.sentence)], expect)


def test_mv_lf_excluded_from_decode(corpus):
    tc = tiny_train_config(use_mv=True, pretrain_epochs=1)
    tr = Trainer(corpus, tc)
    stats = tr.compute_init_stats()
    assert stats.phi_star.shape[0] == tr.model.n_lfs
    tr.pretrain(1, stats)
    preds = tr.model.decode(corpus.split("test"))
    assert len(preds) == len(corpus.split("test"))


# -- generalized EM sanity ---------------------------------------------------------------

def test_gem_step_does_not_decrease_loglik(corpus):
    tc = tiny_train_config(pretrain_epochs=3)
    tr = Trainer(corpus, tc)
    stats = tr.compute_init_stats()
    tr.pretrain(1, stats)
    triples = corpus.split("train")[:32]
    prev = batch_log_likelihood(tr.model, triples, stage=1)
    for _ in range(5):
        gem_step(tr.model, triples, stage=1, lr=1e-4, optimizer="sgd")
        cur = batch_log_likelihood(tr.model, triples, stage=1)
        assert cur >= prev - 1e-6
        prev = cur


# -- determinism & persistence -------------------------------------------------------------

def strip_seconds(metrics):
    return [{k: v for k, v in m.items() if k != "seconds"} for m in metrics]


def test_training_determinism(corpus):
    tc = tiny_train_config(pretrain_epochs=2)
    _, rep1 = Trainer(corpus, tc).train()
    _, rep2 = Trainer(corpus, tc).train()
    assert strip_seconds(rep1.metrics) == strip_seconds(rep2.metrics)
    assert rep1.stage_f1 == rep2.stage_f1


def test_checkpoint_roundtrip_predictions(corpus, tmp_path):
    tc = tiny_train_config(pretrain_epochs=2)
    model, _ = Trainer(corpus, tc).train()
    test = corpus.split("test")
    model.save(tmp_path)
    before = model.decode(test)   # post-save state (weights now f32-rounded)
    loaded = LabelModel.load(tmp_path)
    after = loaded.decode(test)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert loaded.wxor is not None
    assert np.array_equal(loaded.wxor.w_tilde, model.wxor.w_tilde)


def test_trainer_writes_artifacts(corpus, tmp_path):
    tc = tiny_train_config(pretrain_epochs=1,
                           stage1=StageConfig(lr=1e-4, max_epochs=1, patience=1),
                           stage2=StageConfig(lr=1e-4, max_epochs=1, patience=1),
                           stage3=StageConfig(lr=1e-4, max_epochs=1, patience=1,
                                              sample=False))
    Trainer(corpus, tc, out_dir=tmp_path).train()
    for name in ("pre1.scmp", "s1.scmp", "pre2.scmp", "s2.scmp", "s3.scmp",
                 "model.scmp", "model.json", "metrics.jsonl",
                 "reliability_report.json"):
        assert (tmp_path / name).exists(), name
    entries = [json.loads(line)
               for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    stages = {e["stage"] for e in entries}
    assert stages == {"pre1", "s1", "pre2", "s2", "s3"}
    for e in entries:
        assert set(e) == {"stage", "epoch", "q_mean", "valid_p", "valid_r",
                          "valid_f1", "seconds"}


def test_trainer_requires_embeddings():
    ls = LabelSet(("PER",))
    t = Triple(Sentence("s", ("a",), (0,)),
               WeakAnnotationMatrix(("lf",), np.zeros((1, 1), int)))
    from scmm.data import Dataset
    ds = Dataset(ls, {"train": (t,), "valid": (t,)})
    with pytest.raises(ValueError, match="embeddings"):
        Trainer(ds, tiny_train_config())


def test_trainer_requires_gold_on_eval_split(corpus):
    stripped = []
    for t in corpus.split("valid"):
        stripped.append(Triple(Sentence(t.sentence.id, t.sentence.tokens, None),
                               t.weak, t.embedding))
    from scmm.data import Dataset
    ds = Dataset(corpus.label_set,
                 {"train": corpus.split("train"), "valid": tuple(stripped)})
    with pytest.raises(ValueError, match="gold"):
        Trainer(ds, tiny_train_config())


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_train_config(lambda_mix=1.5)
    with pytest.raises(ValueError):
        tiny_train_config(wxor_scope="test")
    with pytest.raises(ValueError):
        tiny_train_config(stage1=StageConfig(lr=-1.0))
    with pytest.raises(ValueError):
        tiny_train_config(stage1=StageConfig(lr=1e-3, patience=0))


def test_wxor_scope_valid_only(corpus):
    tr_all = Trainer(corpus, tiny_train_config())
    tr_all.aggregate_wxor()
    tr_valid = Trainer(corpus, tiny_train_config(wxor_scope="valid"))
    tr_valid.aggregate_wxor()
    n_train_tokens = sum(len(t.sentence) for t in corpus.split("train"))
    n_valid_tokens = sum(len(t.sentence) for t in corpus.split("valid"))
    assert tr_all.model.wxor.counts.sum() == (
        tr_all.model.n_lfs * (n_train_tokens + n_valid_tokens))
    assert tr_valid.model.wxor.counts.sum() == (
        tr_valid.model.n_lfs * n_valid_tokens)


def test_implicit_dirichlet_mode_trains(corpus):
    tc = tiny_train_config(dirichlet_mode="implicit", pretrain_epochs=1,
                           stage1=StageConfig(lr=1e-4, max_epochs=1, patience=1),
                           stage2=StageConfig(lr=1e-4, max_epochs=1, patience=1),
                           stage3=StageConfig(lr=1e-4, max_epochs=1, patience=1,
                                              sample=False))
    model, report = Trainer(corpus, tc).train()
    assert np.isfinite(list(report.stage_f1.values())).all()
    assert all(np.isfinite(m["q_mean"]) for m in report.metrics)
