"""High-level inference API over the kernel backends.

The E-step outputs (PosteriorStats) are plain numpy and always detached;
only the surrogate objective `expected_ll` participates in the tape, and
its gradient flows exclusively through the transition and evidence logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, as_tensor, maximum

EVIDENCE_FLOOR = 1e-30


@dataclass
class PosteriorStats:
    alpha: np.ndarray   # (T+1, L) filtered marginals, row 0 = initial state
    beta: np.ndarray    # (T+1, L) scaled backward messages
    gamma: np.ndarray   # (T+1, L) smoothed marginals
    xi: np.ndarray      # (T, L, L) expected transitions
    c: np.ndarray       # (T+1,) forward normalizers (c[0] = 1)
    log_z: float        # observation log likelihood
    q: float = float("nan")  # surrogate value at the parameters that produced gamma/xi


def _kernels():
    from . import kernels
    return kernels


def emission_evidence(phi, obs: np.ndarray, floor: float = EVIDENCE_FLOOR):
    """Log evidence per token and latent label.

    For a Tensor `phi` of shape (B, K, L, L) and observations (B, K, T)
    this builds the differentiable (B, T, L) tensor
    log_ev[b, t, l] = sum_k log phi[b, k, l, obs[b, k, t]].
    For a plain (K, L, L) array it returns the (T, L) numpy equivalent.
    """
    if isinstance(phi, Tensor):
        obs = np.asarray(obs, dtype=np.intp)
        log_phi = maximum(phi, floor).log()
        return _evidence_gather(log_phi, obs)
    log_phi = np.log(np.maximum(np.asarray(phi), floor))
    return _kernels().evidence(np.ascontiguousarray(log_phi),
                               np.ascontiguousarray(obs, dtype=np.intp))


def _evidence_gather(log_phi: Tensor, obs: np.ndarray) -> Tensor:
    """Custom op: (B, K, L, L) log emissions + (B, K, T) observations
    -> (B, T, L) summed log evidence, scattering gradients back through
    the observed columns."""
    n_batch, n_lfs, n_labels, _ = log_phi.shape
    n_tok = obs.shape[2]
    b_idx = np.arange(n_batch)[:, None, None, None]
    k_idx = np.arange(n_lfs)[None, :, None, None]
    l_idx = np.arange(n_labels)[None, None, None, :]
    j_idx = obs[:, :, :, None]
    vals = log_phi.data[b_idx, k_idx, l_idx, j_idx]   # (B, K, T, L)
    out = vals.sum(axis=1)

    def bwd(g):
        full = np.zeros_like(log_phi.data)
        gb = np.broadcast_to(g[:, None, :, :], (n_batch, n_lfs, n_tok, n_labels))
        np.add.at(full, (b_idx, k_idx, l_idx, j_idx), gb)
        return (full,)
    return Tensor._make(out, (log_phi,), bwd)


def forward_backward(psi: np.ndarray, log_ev: np.ndarray, p0: np.ndarray,
                     with_q: bool = True) -> PosteriorStats:
    """Scaled forward-backward for one sentence; all inputs plain numpy."""
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    log_ev = np.ascontiguousarray(log_ev, dtype=np.float64)
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    alpha, beta, gamma, xi, c, log_z = _kernels().forward_backward(psi, log_ev, p0)
    stats = PosteriorStats(alpha, beta, gamma, xi, c, log_z)
    if with_q:
        with np.errstate(divide="ignore"):
            log_psi = np.log(psi)
            log_p0 = np.log(p0)
        init = float(np.where(gamma[0] > 0, gamma[0] * np.where(np.isfinite(log_p0), log_p0, 0.0), 0.0).sum())
        trans = float(np.where(xi > 0, xi * np.where(np.isfinite(log_psi), log_psi, 0.0), 0.0).sum())
        emit = float((gamma[1:] * log_ev).sum())
        stats.q = init + trans + emit
    return stats


def expected_ll(gamma: np.ndarray, xi: np.ndarray, log_psi: Tensor,
                log_ev: Tensor, p0: np.ndarray) -> Tensor:
    """Expected complete-data log likelihood, differentiable in the logs.

    gamma/xi come from the E-step and are constants here; the initial-state
    term is constant under a fixed p0 and is added as a plain number.
    """
    with np.errstate(divide="ignore"):
        log_p0 = np.log(p0)
    init = float(np.where(gamma[0] > 0,
                          gamma[0] * np.where(np.isfinite(log_p0), log_p0, 0.0),
                          0.0).sum())
    q = (as_tensor(xi) * log_psi).sum() + (as_tensor(gamma[1:]) * log_ev).sum()
    return q + init


def viterbi(psi: np.ndarray, log_ev: np.ndarray, p0: np.ndarray):
    """Best latent path and its joint log score; ties go to the lowest index."""
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    log_ev = np.ascontiguousarray(log_ev, dtype=np.float64)
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    path, score = _kernels().viterbi(psi, log_ev, p0)
    return np.asarray(path, dtype=np.intp), float(score)
