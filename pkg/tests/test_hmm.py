import numpy as np
import pytest

from scmm import hmm
from scmm.autodiff import Tensor, maximum
from scmm.hmm import kernels_py

from helpers import enumerate_posteriors, finite_difference_check, random_hmm_instance


# -- evidence -------------------------------------------------------------------

def test_evidence_single_lf_picks_column():
    rng = np.random.default_rng(0)
    phi = rng.dirichlet(np.ones(4), size=(1, 4))
    obs = np.array([[2, 0, 3]])
    log_ev = hmm.emission_evidence(phi, obs)
    for t, j in enumerate(obs[0]):
        assert np.allclose(np.exp(log_ev[t]), phi[0][:, j])


def test_evidence_uniform_rows():
    n_lfs, n_labels = 3, 4
    phi = np.full((n_lfs, n_labels, n_labels), 1.0 / n_labels)
    log_ev = hmm.emission_evidence(phi, np.zeros((n_lfs, 5), dtype=np.intp))
    assert np.allclose(np.exp(log_ev), (1.0 / n_labels) ** n_lfs)


def test_evidence_hand_product():
    phi = np.zeros((2, 2, 2))
    phi[0] = [[0.9, 0.1], [0.3, 0.7]]
    phi[1] = [[0.6, 0.4], [0.2, 0.8]]
    obs = np.array([[1], [0]])
    log_ev = hmm.emission_evidence(phi, obs)
    assert np.allclose(np.exp(log_ev[0]), [0.1 * 0.6, 0.7 * 0.2], atol=1e-12)


def test_evidence_floor_applies():
    phi = np.zeros((1, 2, 2))
    phi[0] = [[1.0, 0.0], [0.0, 1.0]]
    log_ev = hmm.emission_evidence(phi, np.array([[1]]), floor=1e-30)
    assert np.isfinite(log_ev).all()
    assert log_ev[0, 0] == pytest.approx(np.log(1e-30))


def test_evidence_tensor_path_matches_kernel():
    rng = np.random.default_rng(1)
    phi = rng.dirichlet(np.ones(5), size=(2, 3, 5))
    obs = rng.integers(0, 5, size=(2, 3, 4))
    tape = hmm.emission_evidence(Tensor(phi), obs).data
    for b in range(2):
        plain = hmm.emission_evidence(phi[b], obs[b])
        assert np.allclose(tape[b], plain, atol=1e-12)


# -- forward-backward -------------------------------------------------------------

def test_t1_single_step_marginal():
    rng = np.random.default_rng(2)
    psi, phi, obs, p0 = random_hmm_instance(rng, 3, 1, 1)
    log_ev = hmm.emission_evidence(phi, obs)
    stats = hmm.forward_backward(psi, log_ev, p0)
    expected = p0 @ psi[0] * np.exp(log_ev[0])
    expected /= expected.sum()
    assert np.allclose(stats.gamma[1], expected, atol=1e-12)


def test_uniform_everything_gives_uniform_posteriors():
    n_labels, n_tok = 4, 5
    psi = np.full((n_tok, n_labels, n_labels), 1.0 / n_labels)
    log_ev = np.zeros((n_tok, n_labels))
    p0 = np.full(n_labels, 1.0 / n_labels)
    stats = hmm.forward_backward(psi, log_ev, p0)
    assert np.allclose(stats.gamma, 1.0 / n_labels, atol=1e-12)


def test_matches_bruteforce_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n_labels = int(rng.integers(2, 4))
        n_tok = int(rng.integers(1, 6))
        n_lfs = int(rng.integers(1, 4))
        psi, phi, obs, p0 = random_hmm_instance(rng, n_labels, n_tok, n_lfs)
        log_ev = hmm.emission_evidence(phi, obs)
        stats = hmm.forward_backward(psi, log_ev, p0)
        gamma, xi, log_z, _, _ = enumerate_posteriors(psi, log_ev, p0)
        assert abs(stats.log_z - log_z) < 1e-8
        assert np.abs(stats.gamma - gamma).max() < 1e-8
        assert np.abs(stats.xi - xi).max() < 1e-8


def test_marginal_consistency():
    rng = np.random.default_rng(4)
    psi, phi, obs, p0 = random_hmm_instance(rng, 5, 8, 3)
    log_ev = hmm.emission_evidence(phi, obs)
    stats = hmm.forward_backward(psi, log_ev, p0)
    assert np.allclose(stats.gamma.sum(axis=1), 1.0, atol=1e-8)
    for t in range(8):
        assert np.allclose(stats.xi[t].sum(), 1.0, atol=1e-8)
        assert np.allclose(stats.xi[t].sum(axis=1), stats.gamma[t], atol=1e-8)
        assert np.allclose(stats.xi[t].sum(axis=0), stats.gamma[t + 1], atol=1e-8)
    assert np.all(stats.c > 0)


def test_underflow_resistance_many_lfs():
    # 20 LFs with peaky emission rows: the cumulative evidence product
    # underflows float64 after a few tokens unless the recursion rescales
    rng = np.random.default_rng(5)
    n_labels, n_tok, n_lfs = 5, 30, 20
    psi = rng.dirichlet(np.ones(n_labels), size=(n_tok, n_labels))
    phi = rng.dirichlet(np.full(n_labels, 0.05), size=(n_lfs, n_labels))
    obs = rng.integers(0, n_labels, size=(n_lfs, n_tok))
    p0 = np.zeros(n_labels)
    p0[0] = 1.0
    log_ev = hmm.emission_evidence(phi, obs)
    assert log_ev.sum(axis=1).sum() < -5000  # far beyond exp() range
    stats = hmm.forward_backward(psi, log_ev, p0)
    assert np.isfinite(stats.log_z)
    assert np.allclose(stats.gamma.sum(axis=1), 1.0, atol=1e-8)


def test_degenerate_evidence_names_token():
    psi = np.full((2, 3, 3), 1 / 3)
    log_ev = np.zeros((2, 3))
    log_ev[1] = -np.inf
    p0 = np.array([1.0, 0.0, 0.0])
    with pytest.raises(hmm.DegenerateEvidence, match="token 1"):
        hmm.forward_backward(psi, log_ev, p0)


def test_backends_agree():
    if hmm.BACKEND != "cy":
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(6)
    psi, phi, obs, p0 = random_hmm_instance(rng, 4, 7, 3)
    log_phi = np.log(np.maximum(phi, 1e-30))
    ev_cy = hmm.kernels.evidence(np.ascontiguousarray(log_phi), obs)
    ev_py = kernels_py.evidence(log_phi, obs)
    assert np.allclose(ev_cy, ev_py, atol=1e-12)
    out_cy = hmm.kernels.forward_backward(psi, ev_cy, p0)
    out_py = kernels_py.forward_backward(psi, ev_py, p0)
    for a, b in zip(out_cy, out_py):
        assert np.allclose(a, b, atol=1e-12)
    path_cy, score_cy = hmm.kernels.viterbi(psi, ev_cy, p0)
    path_py, score_py = kernels_py.viterbi(psi, ev_py, p0)
    assert np.array_equal(path_cy, path_py)
    assert score_cy == pytest.approx(score_py, abs=1e-12)


# -- viterbi ------------------------------------------------------------------------

def test_viterbi_deterministic_chain():
    n_labels, n_tok = 3, 4
    psi = np.zeros((n_tok, n_labels, n_labels))
    psi[:, :, :] = 1e-9
    want = [1, 2, 2, 0]
    prev = 0
    for t, j in enumerate(want):
        psi[t, :, :] = 0.01
        psi[t, prev, j] = 0.98
        prev = j
    psi /= psi.sum(axis=-1, keepdims=True)
    log_ev = np.zeros((n_tok, n_labels))
    p0 = np.array([1.0, 0.0, 0.0])
    path, _ = hmm.viterbi(psi, log_ev, p0)
    assert list(path) == want


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(10):
        psi, phi, obs, p0 = random_hmm_instance(rng, 4, 6, 2)
        log_ev = hmm.emission_evidence(phi, obs)
        path, score = hmm.viterbi(psi, log_ev, p0)
        _, _, _, best_path, best_score = enumerate_posteriors(psi, log_ev, p0)
        assert score == pytest.approx(best_score, abs=1e-8)
        assert tuple(path) == best_path
        # the returned path really achieves the returned score
        manual = np.log(p0[0])
        prev = 0
        for t, z in enumerate(path):
            manual += np.log(psi[t][prev, z]) + log_ev[t, z]
            prev = z
        assert manual == pytest.approx(score, abs=1e-10)


def test_viterbi_uniform_ties_break_low():
    n_labels, n_tok = 4, 3
    psi = np.full((n_tok, n_labels, n_labels), 1.0 / n_labels)
    log_ev = np.zeros((n_tok, n_labels))
    p0 = np.full(n_labels, 1.0 / n_labels)
    path, _ = hmm.viterbi(psi, log_ev, p0)
    assert list(path) == [0, 0, 0]


# -- expected log likelihood -----------------------------------------------------------

def test_expected_ll_one_hot_path():
    rng = np.random.default_rng(8)
    psi, phi, obs, p0 = random_hmm_instance(rng, 3, 4, 2)
    log_ev = hmm.emission_evidence(phi, obs)
    chain = [0, 1, 2, 1, 0]  # includes initial state 0
    gamma = np.zeros((5, 3))
    xi = np.zeros((4, 3, 3))
    for t, z in enumerate(chain):
        gamma[t, z] = 1.0
    for t in range(1, 5):
        xi[t - 1, chain[t - 1], chain[t]] = 1.0
    q = hmm.expected_ll(gamma, xi, Tensor(np.log(psi)), Tensor(log_ev), p0)
    manual = np.log(p0[chain[0]])
    for t in range(1, 5):
        manual += np.log(psi[t - 1][chain[t - 1], chain[t]]) + log_ev[t - 1, chain[t]]
    assert q.item() == pytest.approx(manual, abs=1e-10)


def test_expected_ll_self_consistency():
    rng = np.random.default_rng(9)
    psi, phi, obs, p0 = random_hmm_instance(rng, 4, 5, 2)
    log_ev = hmm.emission_evidence(phi, obs)
    stats = hmm.forward_backward(psi, log_ev, p0)
    q = hmm.expected_ll(stats.gamma, stats.xi, Tensor(np.log(psi)),
                        Tensor(log_ev), p0)
    assert q.item() == pytest.approx(stats.q, abs=1e-10)


def test_expected_ll_gradient_only_through_logs():
    rng = np.random.default_rng(10)
    psi, phi, obs, p0 = random_hmm_instance(rng, 3, 3, 2)
    log_ev_np = hmm.emission_evidence(phi, obs)
    stats = hmm.forward_backward(psi, log_ev_np, p0)

    log_psi = Tensor(np.log(psi), requires_grad=True)
    log_ev = Tensor(log_ev_np, requires_grad=True)

    def forward():
        return hmm.expected_ll(stats.gamma, stats.xi, log_psi, log_ev, p0)

    finite_difference_check([log_psi, log_ev], forward)
    # with posteriors fixed, the gradients are exactly the posteriors
    log_psi.grad = log_ev.grad = None
    forward().backward()
    assert np.allclose(log_psi.grad, stats.xi, atol=1e-12)
    assert np.allclose(log_ev.grad, stats.gamma[1:], atol=1e-12)
