# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inference kernels: evidence, scaled forward-backward, Viterbi.

Same contracts as kernels_py; the Python file is the reference the tests
compare against.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

from scmm.hmm.kernels_py import DegenerateEvidence

cnp.import_array()


def evidence(double[:, :, ::1] log_phi, cnp.intp_t[:, ::1] obs):
    cdef Py_ssize_t n_lfs = log_phi.shape[0]
    cdef Py_ssize_t n_labels = log_phi.shape[1]
    cdef Py_ssize_t n_tok = obs.shape[1]
    out_arr = np.zeros((n_tok, n_labels))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, t, l
    for k in range(n_lfs):
        for t in range(n_tok):
            for l in range(n_labels):
                out[t, l] += log_phi[k, l, obs[k, t]]
    return out_arr


def forward_backward(double[:, :, ::1] psi, double[:, ::1] log_ev, double[::1] p0):
    cdef Py_ssize_t n_tok = log_ev.shape[0]
    cdef Py_ssize_t n_labels = log_ev.shape[1]

    alpha_arr = np.zeros((n_tok + 1, n_labels))
    beta_arr = np.zeros((n_tok + 1, n_labels))
    gamma_arr = np.zeros((n_tok + 1, n_labels))
    xi_arr = np.zeros((n_tok, n_labels, n_labels))
    c_arr = np.zeros(n_tok + 1)
    ev_arr = np.zeros((n_tok, n_labels))

    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] gamma = gamma_arr
    cdef double[:, :, ::1] xi = xi_arr
    cdef double[::1] c = c_arr
    cdef double[:, ::1] ev = ev_arr

    cdef Py_ssize_t t, i, j
    cdef double shift_sum = 0.0, m, tot, acc, log_z

    for t in range(n_tok):
        m = -INFINITY
        for j in range(n_labels):
            if log_ev[t, j] > m:
                m = log_ev[t, j]
        if m == -INFINITY or m != m:
            raise DegenerateEvidence(f"token {t}: all-zero evidence row")
        shift_sum += m
        for j in range(n_labels):
            ev[t, j] = exp(log_ev[t, j] - m)

    for j in range(n_labels):
        alpha[0, j] = p0[j]
    c[0] = 1.0
    for t in range(1, n_tok + 1):
        tot = 0.0
        for j in range(n_labels):
            acc = 0.0
            for i in range(n_labels):
                acc += psi[t - 1, i, j] * alpha[t - 1, i]
            alpha[t, j] = ev[t - 1, j] * acc
            tot += alpha[t, j]
        if tot <= 0.0 or tot != tot:
            raise DegenerateEvidence(f"token {t - 1}: forward mass vanished")
        c[t] = tot
        for j in range(n_labels):
            alpha[t, j] /= tot

    for j in range(n_labels):
        beta[n_tok, j] = 1.0
    for t in range(n_tok, 0, -1):
        for i in range(n_labels):
            acc = 0.0
            for j in range(n_labels):
                acc += psi[t - 1, i, j] * ev[t - 1, j] * beta[t, j]
            beta[t - 1, i] = acc / c[t]

    for t in range(n_tok + 1):
        for j in range(n_labels):
            gamma[t, j] = alpha[t, j] * beta[t, j]
    for t in range(1, n_tok + 1):
        for i in range(n_labels):
            for j in range(n_labels):
                xi[t - 1, i, j] = (psi[t - 1, i, j] * alpha[t - 1, i]
                                   * ev[t - 1, j] * beta[t, j] / c[t])

    log_z = shift_sum
    for t in range(1, n_tok + 1):
        log_z += log(c[t])
    return alpha_arr, beta_arr, gamma_arr, xi_arr, c_arr, log_z


def viterbi(double[:, :, ::1] psi, double[:, ::1] log_ev, double[::1] p0):
    cdef Py_ssize_t n_tok = log_ev.shape[0]
    cdef Py_ssize_t n_labels = log_ev.shape[1]

    back_arr = np.zeros((n_tok, n_labels), dtype=np.intp)
    path_arr = np.zeros(n_tok, dtype=np.intp)
    delta_arr = np.zeros(n_labels)
    next_arr = np.zeros(n_labels)
    cdef cnp.intp_t[:, ::1] back = back_arr
    cdef cnp.intp_t[::1] path = path_arr
    cdef double[::1] delta = delta_arr
    cdef double[::1] nxt = next_arr

    cdef Py_ssize_t t, i, j, argbest
    cdef double best, cand, score

    for j in range(n_labels):
        delta[j] = log(p0[j]) if p0[j] > 0.0 else -INFINITY
    for t in range(n_tok):
        for j in range(n_labels):
            best = -INFINITY
            argbest = 0
            for i in range(n_labels):
                if psi[t, i, j] > 0.0:
                    cand = delta[i] + log(psi[t, i, j])
                else:
                    cand = -INFINITY
                if cand > best:
                    best = cand
                    argbest = i
            back[t, j] = argbest
            nxt[j] = best + log_ev[t, j]
        for j in range(n_labels):
            delta[j] = nxt[j]

    best = -INFINITY
    argbest = 0
    for j in range(n_labels):
        if delta[j] > best:
            best = delta[j]
            argbest = j
    path[n_tok - 1] = argbest
    score = best
    for t in range(n_tok - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path_arr, score
