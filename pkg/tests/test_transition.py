import numpy as np
import pytest

from scmm.nn import DenseLayer
from scmm.transition import initial_distribution, predict_transition

from helpers import finite_difference_check


def test_zero_weights_give_uniform_rows():
    layer = DenseLayer(np.zeros((4, 25)), np.zeros(25))
    psi = predict_transition(np.random.default_rng(0).normal(size=(2, 3, 4)),
                             layer, 5).data
    assert np.allclose(psi, 0.2)


def test_rows_stochastic_for_random_weights():
    rng = np.random.default_rng(1)
    layer = DenseLayer(rng.normal(size=(4, 25)) * 5, rng.normal(size=25))
    psi = predict_transition(rng.normal(size=(3, 6, 4)), layer, 5).data
    assert np.all(psi > 0)
    assert np.allclose(psi.sum(axis=-1), 1.0, atol=1e-9)


def test_output_dim_checked():
    layer = DenseLayer(np.zeros((4, 24)), np.zeros(24))
    with pytest.raises(ValueError, match="25"):
        predict_transition(np.zeros((1, 2, 4)), layer, 5)


def test_token_permutation_equivariance():
    rng = np.random.default_rng(2)
    layer = DenseLayer.init(rng, 4, 9)
    toks = rng.normal(size=(1, 5, 4))
    psi = predict_transition(toks, layer, 3).data
    perm = rng.permutation(5)
    psi_perm = predict_transition(toks[:, perm], layer, 3).data
    assert np.allclose(psi_perm, psi[:, perm])


def test_gradient_matches_fd():
    rng = np.random.default_rng(3)
    layer = DenseLayer.init(rng, 4, 9)
    toks = rng.normal(size=(2, 3, 4))
    coef = rng.normal(size=(2, 3, 3, 3))

    def forward():
        psi = predict_transition(toks, layer, 3)
        return (psi.log() * coef).sum()

    finite_difference_check([layer.weights, layer.bias], forward)


def test_initial_distribution():
    delta = initial_distribution(5, "delta")
    assert delta[0] == 1.0 and delta.sum() == 1.0
    uniform = initial_distribution(5, "uniform")
    assert np.allclose(uniform, 0.2)
    with pytest.raises(ValueError):
        initial_distribution(5, "stationary")
