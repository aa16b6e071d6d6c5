import numpy as np
import pytest

from batle.config import LossWeights
from batle.errors import BatleError, ShapeError
from batle.services.losses import (
    LOG_2PI,
    PROB_EPS,
    adversarial_loss,
    adversarial_loss_grad,
    discriminator_loss,
    discriminator_loss_grad,
    loss_gradients,
    outcome_loss,
    propensity_loss,
    propensity_loss_grad,
    reconstruction_loss,
    squared_error_outcome_loss,
    total_loss,
)
from batle.services.network import ForwardOutput


def make_output(n, seed=0, discriminator=True, decoder=True, width=3):
    g = np.random.default_rng(seed)
    return ForwardOutput(
        representation=np.zeros((n, 2)),
        propensity=g.uniform(0.2, 0.8, size=n),
        mu0=g.normal(size=n),
        mu1=g.normal(size=n),
        sigma0=g.uniform(0.5, 2.0, size=n),
        sigma1=g.uniform(0.5, 2.0, size=n),
        disc_prob=g.uniform(0.2, 0.8, size=n) if discriminator else None,
        reconstruction=g.normal(size=(n, width)) if decoder else None,
    )


def test_closed_form_values():
    one = np.array([1.0])
    x = np.random.default_rng(4).normal(size=(5, 3))
    flags = np.array([1, 1, 0, 0, 0])
    assert discriminator_loss(flags, np.full(5, 0.5)) == pytest.approx(np.log(2), abs=1e-9)
    assert adversarial_loss(np.zeros(5)) == pytest.approx(0.0, abs=1e-9)
    assert reconstruction_loss(x, x.copy()) == pytest.approx(0.0, abs=1e-9)
    y = np.array([0.3, -1.2, 2.0])
    t = np.array([1.0, 0.0, 1.0])
    assert outcome_loss(y, t, y.copy(), y.copy(), np.ones(3), np.ones(3)) == pytest.approx(0.5 * LOG_2PI, abs=1e-9)
    assert outcome_loss(one, one, np.zeros(1), one, one, one) == pytest.approx(0.5 * LOG_2PI)
    assert propensity_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.log(2))
    assert discriminator_loss(np.array([1, 0]), np.array([0.8, 0.2])) == pytest.approx(-np.log(0.8))
    assert adversarial_loss(np.array([0.5])) == pytest.approx(np.log(0.5))
    assert reconstruction_loss(np.array([[1.0, 2.0]]), np.zeros((1, 2))) == pytest.approx(2.5)
    assert squared_error_outcome_loss(np.array([3.0]), np.array([0.0]), one, np.zeros(1)) == pytest.approx(4.0)


def test_outcome_loss_uses_factual_head_only():
    y = np.array([1.0, 2.0])
    t = np.array([1.0, 0.0])
    mu0 = np.array([0.0, 2.0])
    mu1 = np.array([1.0, 0.0])
    s = np.ones(2)
    base = outcome_loss(y, t, mu0, mu1, s, s)
    assert outcome_loss(y, t, np.array([50.0, 2.0]), np.array([1.0, -50.0]), s, s) == base


def test_target_terms_ignore_source_rows():
    out = make_output(6)
    x = np.zeros((6, 3))
    d = np.array([1, 1, 1, 0, 0, 0])
    t = np.array([0.0, 1.0, 1.0, np.nan, np.nan, np.nan])
    y = np.array([0.5, -1.0, 2.0, np.nan, np.nan, np.nan])
    a, _ = loss_gradients(out, x, d, t, y, LossWeights())
    garbage_t = np.array([0.0, 1.0, 1.0, 7.0, -3.0, 1.0])
    garbage_y = np.array([0.5, -1.0, 2.0, 1e6, -1e6, 0.0])
    out.mu0[3:] = 1e3
    out.propensity[3:] = 0.999
    b, _ = loss_gradients(out, x, d, garbage_t, garbage_y, LossWeights())
    assert (a.l_y, a.l_t) == (b.l_y, b.l_t)
    assert a.n_target == 3 and a.n_rows == 6


def test_duplicating_the_batch_changes_nothing():
    out = make_output(4)
    x = np.random.default_rng(1).normal(size=(4, 3))
    d = np.array([1, 1, 0, 0])
    t = np.array([0.0, 1.0, np.nan, np.nan])
    y = np.array([0.3, 0.7, np.nan, np.nan])
    single, _ = loss_gradients(out, x, d, t, y, LossWeights())
    doubled = ForwardOutput(
        **{
            name: np.concatenate([getattr(out, name)] * 2)
            for name in ("representation", "propensity", "mu0", "mu1", "sigma0", "sigma1", "disc_prob", "reconstruction")
        }
    )
    twice, _ = loss_gradients(doubled, np.vstack([x, x]), np.tile(d, 2), np.tile(t, 2), np.tile(y, 2), LossWeights())
    np.testing.assert_allclose(twice.terms(), single.terms(), rtol=1e-12)


def test_total_is_weighted_sum():
    weights = LossWeights(outcome=1, propensity=2, discriminator=3, adversarial=4, reconstruction=5)
    assert total_loss((1, 1, 1, 1, 1), weights).total == 15
    assert total_loss((1, 2, 3, 4, 5), LossWeights()).total == 15


def test_reported_total_matches_recomputed_terms():
    out = make_output(5, seed=3)
    x = np.random.default_rng(2).normal(size=(5, 3))
    d = np.array([1, 1, 1, 0, 0])
    t = np.array([1.0, 0.0, 1.0, np.nan, np.nan])
    y = np.array([1.0, 0.0, 2.0, np.nan, np.nan])
    weights = LossWeights(outcome=0.5, adversarial=0.1)
    breakdown, _ = loss_gradients(out, x, d, t, y, weights)
    mask = d == 1
    terms = (
        outcome_loss(y, t, out.mu0, out.mu1, out.sigma0, out.sigma1, mask),
        propensity_loss(t, out.propensity, mask),
        discriminator_loss(d, out.disc_prob),
        adversarial_loss(out.disc_prob),
        reconstruction_loss(x, out.reconstruction),
    )
    assert breakdown.total == pytest.approx(total_loss(terms, weights).total, rel=1e-12)


def test_disabled_heads_contribute_zero():
    out = make_output(3, discriminator=False, decoder=False)
    d = np.array([1, 1, 0])
    t = np.array([0.0, 1.0, np.nan])
    y = np.array([0.0, 1.0, np.nan])
    breakdown, upstream = loss_gradients(out, np.zeros((3, 3)), d, t, y, LossWeights())
    assert breakdown.l_d == breakdown.l_a == breakdown.l_r == 0.0
    assert upstream.disc_prob is None and upstream.reconstruction is None


def test_inactive_terms_have_no_gradient():
    out = make_output(4)
    d = np.array([1, 1, 0, 0])
    t = np.array([0.0, 1.0, np.nan, np.nan])
    y = np.array([0.0, 1.0, np.nan, np.nan])
    _, upstream = loss_gradients(out, np.zeros((4, 3)), d, t, y, LossWeights(), active={"l_d"})
    assert upstream.mu0 is None and upstream.propensity is None and upstream.reconstruction is None
    assert upstream.disc_prob is not None
    with pytest.raises(BatleError):
        loss_gradients(out, np.zeros((4, 3)), d, t, y, LossWeights(), active={"l_q"})


def test_batch_without_target_rows_raises():
    out = make_output(2)
    with pytest.raises(BatleError, match="n_t = 0"):
        loss_gradients(out, np.zeros((2, 3)), np.zeros(2), np.full(2, np.nan), np.full(2, np.nan), LossWeights())


def test_clipped_probabilities_have_zero_gradient():
    value, grad = propensity_loss_grad(np.array([1.0, 1.0]), np.array([0.0, 0.5]))
    assert np.isfinite(value)
    assert value == pytest.approx((-np.log(PROB_EPS) + np.log(2)) / 2)
    assert grad[0] == 0.0 and grad[1] != 0.0


def test_reconstruction_shape_mismatch():
    with pytest.raises(ShapeError):
        reconstruction_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def test_reversal_swaps_the_encoder_signal_only():
    out = make_output(4, seed=5)
    x = np.zeros((4, 3))
    d = np.array([1, 1, 0, 0])
    t = np.array([0.0, 1.0, np.nan, np.nan])
    y = np.array([0.0, 1.0, np.nan, np.nan])
    weights = LossWeights(adversarial=0.5)
    direct, direct_up = loss_gradients(out, x, d, t, y, weights, active={"l_a"})
    reversed_, reversed_up = loss_gradients(out, x, d, t, y, weights, active={"l_a"}, adversarial="reversal")
    assert direct.terms() == reversed_.terms()
    _, d_disc = discriminator_loss_grad(d, out.disc_prob)
    _, d_adv = adversarial_loss_grad(out.disc_prob)
    np.testing.assert_allclose(direct_up.disc_prob, 0.5 * d_adv)
    np.testing.assert_allclose(reversed_up.disc_prob, -0.5 * d_disc)
    with pytest.raises(BatleError, match="adversarial gradient"):
        loss_gradients(out, x, d, t, y, weights, adversarial="flipped")


def test_reversed_signal_is_balanced_at_the_discriminator_optimum():
    d = np.array([1, 1, 1, 0])
    weights = LossWeights()
    out = make_output(4)
    out.disc_prob = np.full(4, 0.75)  # D_hat = share of target rows
    t = np.array([0.0, 1.0, 1.0, np.nan])
    y = np.array([0.0, 1.0, 2.0, np.nan])
    _, direct = loss_gradients(out, np.zeros((4, 3)), d, t, y, weights, active={"l_a"})
    _, reversed_ = loss_gradients(out, np.zeros((4, 3)), d, t, y, weights, active={"l_a"}, adversarial="reversal")
    # gradient on the discriminator logit is grad * p * (1 - p)
    p = out.disc_prob
    assert np.sum(reversed_.disc_prob * p * (1 - p)) == pytest.approx(0.0, abs=1e-12)
    assert np.sum(direct.disc_prob * p * (1 - p)) < 0
