"""Pure numpy inference kernels; reference implementation of the compiled core.

All three kernels are per sentence.  `psi` is (T, L, L) row-stochastic,
`log_ev` is (T, L) log emission evidence, `p0` the initial distribution.
"""

from __future__ import annotations

import numpy as np


class DegenerateEvidence(ValueError):
    """A token's evidence has no usable mass."""


def evidence(log_phi: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Token evidence: log_ev[t, l] = sum_k log_phi[k, l, obs[k, t]]."""
    n_lfs, n_labels, _ = log_phi.shape
    n_tok = obs.shape[1]
    out = np.zeros((n_tok, n_labels))
    for k in range(n_lfs):
        out += log_phi[k][:, obs[k]].T
    return out


def forward_backward(psi: np.ndarray, log_ev: np.ndarray, p0: np.ndarray):
    """Scaled forward-backward pass.

    Returns (alpha, beta, gamma, xi, c, log_z) where alpha/beta/gamma are
    (T+1, L) with index 0 the pre-sentence state, xi is (T, L, L), and c
    holds the per-step normalizers of the shifted evidence (c[0] = 1).
    The observation log likelihood is sum(log c) plus the per-step shifts,
    already folded into log_z.
    """
    n_tok, n_labels = log_ev.shape
    shift = log_ev.max(axis=1)
    if not np.isfinite(shift).all():
        bad = int(np.argmin(np.isfinite(shift)))
        raise DegenerateEvidence(f"token {bad}: all-zero evidence row")
    ev = np.exp(log_ev - shift[:, None])

    alpha = np.zeros((n_tok + 1, n_labels))
    c = np.zeros(n_tok + 1)
    alpha[0] = p0
    c[0] = 1.0
    for t in range(1, n_tok + 1):
        a = ev[t - 1] * (psi[t - 1].T @ alpha[t - 1])
        tot = a.sum()
        if tot <= 0.0 or not np.isfinite(tot):
            raise DegenerateEvidence(f"token {t - 1}: forward mass vanished")
        c[t] = tot
        alpha[t] = a / tot

    beta = np.zeros((n_tok + 1, n_labels))
    beta[n_tok] = 1.0
    for t in range(n_tok, 0, -1):
        beta[t - 1] = psi[t - 1] @ (ev[t - 1] * beta[t]) / c[t]

    gamma = alpha * beta
    xi = np.zeros((n_tok, n_labels, n_labels))
    for t in range(1, n_tok + 1):
        xi[t - 1] = psi[t - 1] * np.outer(alpha[t - 1], ev[t - 1] * beta[t]) / c[t]

    log_z = float(np.log(c[1:]).sum() + shift.sum())
    return alpha, beta, gamma, xi, c, log_z


def viterbi(psi: np.ndarray, log_ev: np.ndarray, p0: np.ndarray):
    """Most likely latent path (including the pre-sentence state).

    Ties break toward the lowest label index.  Returns (path, log_score)
    with path of length T.
    """
    n_tok, n_labels = log_ev.shape
    with np.errstate(divide="ignore"):
        log_psi = np.log(psi)
        delta = np.log(p0)
    back = np.zeros((n_tok, n_labels), dtype=np.intp)
    for t in range(n_tok):
        cand = delta[:, None] + log_psi[t]
        back[t] = cand.argmax(axis=0)
        delta = cand[back[t], np.arange(n_labels)] + log_ev[t]
    path = np.zeros(n_tok, dtype=np.intp)
    path[-1] = int(delta.argmax())
    score = float(delta[path[-1]])
    for t in range(n_tok - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score
