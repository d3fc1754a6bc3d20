"""Shared test utilities: finite differences, enumeration oracles, tiny corpora."""

from __future__ import annotations

import itertools

import numpy as np

from scmm.emission import EmissionHyper
from scmm.synth import SynthConfig, generate_corpus
from scmm.trainer import StageConfig, TrainConfig


def finite_difference_check(params, forward, h=1e-5, tol=1e-4):
    """Compare analytic gradients of forward() against central differences.

    Every coordinate of every parameter is perturbed; returns the worst
    relative error seen (and asserts it is within tol).
    """
    loss = forward()
    for p in params:
        p.grad = None
    loss.backward()
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = forward().item()
            flat[i] = orig - h
            down = forward().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / scale)
    assert worst <= tol, f"finite-difference mismatch: {worst:.3e} > {tol:.0e}"
    return worst


def enumerate_posteriors(psi, log_ev, p0):
    """Exhaustive path-sum oracle over all latent chains z^(0:T).

    Materializes every chain and accumulates exact path probabilities,
    so it stays independent of the recursive implementation it checks.
    Returns (gamma, xi, log_z, best_path, best_score).
    """
    n_tok, n_labels = log_ev.shape
    ev = np.exp(log_ev)
    chains = np.array(list(itertools.product(range(n_labels), repeat=n_tok + 1)),
                      dtype=np.intp)
    probs = p0[chains[:, 0]].astype(np.float64)
    for t in range(1, n_tok + 1):
        probs = probs * psi[t - 1][chains[:, t - 1], chains[:, t]] * ev[t - 1, chains[:, t]]
    z_total = probs.sum()
    gamma = np.zeros((n_tok + 1, n_labels))
    xi = np.zeros((n_tok, n_labels, n_labels))
    for t in range(n_tok + 1):
        np.add.at(gamma[t], chains[:, t], probs)
    for t in range(1, n_tok + 1):
        np.add.at(xi[t - 1], (chains[:, t - 1], chains[:, t]), probs)
    gamma /= z_total
    xi /= z_total
    best = int(probs.argmax())
    best_score = np.log(probs[best]) if probs[best] > 0 else -np.inf
    return (gamma, xi, float(np.log(z_total)), tuple(chains[best, 1:]),
            float(best_score))


def random_hmm_instance(rng, n_labels, n_tok, n_lfs):
    """A random inference problem: stochastic transitions, emissions, obs."""
    psi = rng.dirichlet(np.ones(n_labels), size=(n_tok, n_labels))
    phi = rng.dirichlet(np.ones(n_labels), size=(n_lfs, n_labels))
    obs = rng.integers(0, n_labels, size=(n_lfs, n_tok))
    p0 = np.zeros(n_labels)
    p0[0] = 1.0
    return psi, phi, obs, p0


def tiny_corpus(seed=7, n_train=60, n_valid=24, n_test=24):
    return generate_corpus(SynthConfig(
        n_train=n_train, n_valid=n_valid, n_test=n_test,
        min_len=5, max_len=8, seed=seed))


def tiny_train_config(seed=3, **overrides):
    defaults = dict(
        seed=seed, batch_size=16, pretrain_epochs=3,
        stage1=StageConfig(lr=2e-4, max_epochs=2, patience=2),
        stage2=StageConfig(lr=1e-4, max_epochs=2, patience=2),
        stage3=StageConfig(lr=2e-4, max_epochs=2, patience=2, sample=False),
        hyper=EmissionHyper(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def acceptance_train_config(seed=20240811):
    """The desk-scale configuration the acceptance suite trains with."""
    return TrainConfig(
        seed=seed, batch_size=256, lr_pretrain=5e-4, pretrain_epochs=20,
        stage1=StageConfig(lr=2e-4, max_epochs=30, patience=4),
        stage2=StageConfig(lr=1e-4, max_epochs=15, patience=3),
        stage3=StageConfig(lr=2e-4, max_epochs=30, patience=6, sample=False),
        hyper=EmissionHyper(g_r_s1=0.02, g_r_s23=0.02),
    )
