import filecmp

import numpy as np
import pytest

from scmm.data import validate_bio
from scmm.synth import (
    SynthConfig,
    default_lf_emissions,
    expected_label_distribution,
    generate_corpus,
    resolve_lf_emissions,
    resolve_transition,
    write_corpus,
)
from scmm.trainer import true_emission_stats


def small_cfg(**kw):
    base = dict(n_train=40, n_valid=10, n_test=10, min_len=4, max_len=7, seed=5)
    base.update(kw)
    return SynthConfig(**base)


def test_default_transition_is_bio_consistent():
    cfg = small_cfg()
    trans = resolve_transition(cfg)
    ls = cfg.label_set
    assert np.allclose(trans.sum(axis=1), 1.0)
    # I-e columns reachable only from B-e / I-e
    for e in range(ls.n_entities):
        col = 2 * e + 2
        for i in range(ls.size):
            if i not in (col, col - 1):
                assert trans[i, col] == 0.0


def test_bad_transition_rejected():
    trans = np.full((5, 5), 0.2)  # O -> I-e has mass
    with pytest.raises(ValueError, match="BIO"):
        resolve_transition(small_cfg(transition=trans))


def test_default_lf_emissions_rows_stochastic():
    mats = default_lf_emissions(small_cfg())
    assert mats.shape == (6, 5, 5)
    assert np.allclose(mats.sum(axis=2), 1.0, atol=1e-12)
    assert (mats >= 0).all()
    diags = [mats[k, 1, 1] for k in range(6)]
    assert diags == list(small_cfg().lf_diagonals)
    # the designated LF carries an off-diagonal confusion block
    k = small_cfg().confusion_lf
    assert mats[k, 1, 3] > 0.2


def test_gold_is_strict_bio():
    ds = generate_corpus(small_cfg())
    for split in ds.splits.values():
        for t in split:
            assert validate_bio(t.sentence.gold, ds.label_set, "strict") == []


def test_identity_lf_copies_gold():
    eye = np.tile(np.eye(5), (2, 1, 1))
    cfg = small_cfg(lf_emissions=eye, confusion_mass=0.0)
    ds = generate_corpus(cfg)
    for t in ds.split("train"):
        for k in range(2):
            assert np.array_equal(t.weak.obs[k], t.sentence.gold)


def test_delta_on_o_lf_always_abstains():
    mats = np.zeros((2, 5, 5))
    mats[:, :, 0] = 1.0
    cfg = small_cfg(lf_emissions=mats, confusion_mass=0.0)
    ds = generate_corpus(cfg)
    for t in ds.split("train"):
        assert np.all(t.weak.obs == 0)


def test_seed_determinism_byte_identical(tmp_path):
    cfg = small_cfg()
    a, b = tmp_path / "a", tmp_path / "b"
    write_corpus(cfg, generate_corpus(cfg), a)
    write_corpus(cfg, generate_corpus(cfg), b)
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl",
                 "train.bin", "valid.bin", "test.bin", "phi_gen.json"):
        assert filecmp.cmp(a / name, b / name, shallow=False), name


def test_different_seed_differs(tmp_path):
    ds1 = generate_corpus(small_cfg(seed=1))
    ds2 = generate_corpus(small_cfg(seed=2))
    assert ds1.split("train")[0].sentence.gold != ds2.split("train")[0].sentence.gold


def test_embedding_shapes_and_signal():
    cfg = small_cfg(embed_dim=16, embed_noise=0.1)
    ds = generate_corpus(cfg)
    t = ds.split("train")[0]
    assert t.embedding.vectors.shape == (len(t.sentence) + 1, 16)
    # sentence vector is the token mean
    assert np.allclose(t.embedding.sentence_vector,
                       t.embedding.token_vectors.mean(axis=0), atol=1e-5)


def test_phi_true_recovers_generator_within_tolerance():
    # enough tokens per latent label that counts pin the generator values
    cfg = SynthConfig(n_train=5500, n_valid=10, n_test=10, min_len=10,
                      max_len=14, entity_density=0.45, seed=11)
    ds = generate_corpus(cfg)
    train = list(ds.split("train"))
    counts = np.bincount(
        np.concatenate([t.sentence.gold for t in train]), minlength=5)
    assert counts.min() >= 5000, f"label counts too small: {counts}"
    phi_true = true_emission_stats(train, ds.label_set)
    phi_gen = resolve_lf_emissions(cfg)
    assert np.abs(phi_true - phi_gen).max() <= 0.03


def test_lf_token_precision_recall_closed_form():
    cfg = SynthConfig(n_train=3000, n_valid=10, n_test=10, min_len=10,
                      max_len=14, entity_density=0.4, seed=13)
    ds = generate_corpus(cfg)
    mu = expected_label_distribution(cfg)
    phi_gen = resolve_lf_emissions(cfg)
    train = list(ds.split("train"))
    gold = np.concatenate([t.sentence.gold for t in train])
    obs = np.concatenate([t.weak.obs for t in train], axis=1)
    for k in (0, 3):
        for j in (1, 3):
            # recall: P(x=j | y=j); precision: P(y=j | x=j)
            want_recall = phi_gen[k, j, j]
            got_recall = np.mean(obs[k][gold == j] == j)
            assert abs(got_recall - want_recall) < 0.02
            want_prec = (mu[j] * phi_gen[k, j, j]
                         / (mu @ phi_gen[k, :, j]))
            got_prec = np.mean(gold[obs[k] == j] == j)
            assert abs(got_prec - want_prec) < 0.03


def test_label_marginal_matches_empirical():
    cfg = small_cfg(n_train=3000, min_len=8, max_len=12)
    mu = expected_label_distribution(cfg)
    ds = generate_corpus(cfg)
    gold = np.concatenate([t.sentence.gold for t in ds.split("train")])
    emp = np.bincount(gold, minlength=5) / len(gold)
    assert np.abs(mu - emp).max() < 0.02
