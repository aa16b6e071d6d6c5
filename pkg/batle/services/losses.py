"""
Loss terms and their gradients with respect to the network outputs.

    l_y  Gaussian negative log-likelihood of the factual outcome head (target rows)
    l_t  propensity cross-entropy (target rows)
    l_d  discriminator cross-entropy against the domain flag (all rows)
    l_a  mean log(1 - D_hat) (all rows)
    l_r  reconstruction mean squared error (all rows)

    total = a0 l_y + a1 l_t + a2 l_d + a3 l_a + a4 l_r

Target-only terms index labels through the target mask, so the label storage of
source rows is never read. Probabilities are clipped to [1e-12, 1 - 1e-12]
before any log; the gradient is zero where clipping is active.
"""
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from batle.config import LossWeights
from batle.errors import BatleError, ShapeError
from batle.services.network import ForwardOutput, HeadGradients

PROB_EPS = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))
TERMS = ("l_y", "l_t", "l_d", "l_a", "l_r")
ADVERSARIAL_MODES = ("direct", "reversal")


@dataclass
class LossBreakdown:
    l_y: float
    l_t: float
    l_d: float
    l_a: float
    l_r: float
    total: float
    n_target: int = 0
    n_rows: int = 0

    def terms(self) -> Tuple[float, float, float, float, float]:
        return (self.l_y, self.l_t, self.l_d, self.l_a, self.l_r)

    def as_dict(self) -> dict:
        return asdict(self)


def _selected(mask: Optional[np.ndarray], n: int) -> np.ndarray:
    rows = np.arange(n) if mask is None else np.flatnonzero(mask)
    if rows.size == 0:
        raise BatleError("no target rows in this batch (n_t = 0)")
    return rows


def _clipped(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    clipped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return clipped, clipped == p


def _bce(labels: np.ndarray, probs: np.ndarray) -> Tuple[float, np.ndarray]:
    p, inside = _clipped(probs)
    n = labels.shape[0]
    value = -float(np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))) / n
    grad = -(labels / p - (1.0 - labels) / (1.0 - p)) / n
    return value, np.where(inside, grad, 0.0)


def _factual(t: np.ndarray, a0: np.ndarray, a1: np.ndarray) -> np.ndarray:
    return np.where(t == 1.0, a1, a0)


def _scatter(rows: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[rows] = values
    return out


def gaussian_outcome_loss_grad(y, t, mu0, mu1, sigma0, sigma1, target_mask=None):
    """Value and (d_mu0, d_mu1, d_sigma0, d_sigma1); only the factual head of each row is touched."""
    n = mu0.shape[0]
    rows = _selected(target_mask, n)
    tt, yy = t[rows], y[rows]
    mu = _factual(tt, mu0[rows], mu1[rows])
    sigma = _factual(tt, sigma0[rows], sigma1[rows])
    resid = yy - mu
    var = sigma**2
    n_t = rows.size
    value = float(np.sum(0.5 * (LOG_2PI + np.log(var)) + resid**2 / (2.0 * var))) / n_t

    d_mu = -resid / var / n_t
    d_sigma = (1.0 / sigma - resid**2 / sigma**3) / n_t
    treated = tt == 1.0
    return value, (
        _scatter(rows[~treated], d_mu[~treated], n),
        _scatter(rows[treated], d_mu[treated], n),
        _scatter(rows[~treated], d_sigma[~treated], n),
        _scatter(rows[treated], d_sigma[treated], n),
    )


def outcome_loss(y, t, mu0, mu1, sigma0, sigma1, target_mask=None) -> float:
    """-(1/n_t) sum over target rows of log N(y | mu_t, sigma_t^2) for the factual t."""
    return gaussian_outcome_loss_grad(y, t, mu0, mu1, sigma0, sigma1, target_mask)[0]


def squared_error_outcome_loss_grad(y, t, mu0, mu1, target_mask=None):
    n = mu0.shape[0]
    rows = _selected(target_mask, n)
    tt = t[rows]
    resid = y[rows] - _factual(tt, mu0[rows], mu1[rows])
    n_t = rows.size
    value = float(np.sum(resid**2)) / n_t
    d_mu = -2.0 * resid / n_t
    treated = tt == 1.0
    return value, (_scatter(rows[~treated], d_mu[~treated], n), _scatter(rows[treated], d_mu[treated], n))


def squared_error_outcome_loss(y, t, mu0, mu1, target_mask=None) -> float:
    """Point-head outcome loss: mean squared error of the factual head over target rows."""
    return squared_error_outcome_loss_grad(y, t, mu0, mu1, target_mask)[0]


def propensity_loss_grad(t, propensity, target_mask=None):
    n = propensity.shape[0]
    rows = _selected(target_mask, n)
    value, grad = _bce(t[rows], propensity[rows])
    return value, _scatter(rows, grad, n)


def propensity_loss(t, propensity, target_mask=None) -> float:
    return propensity_loss_grad(t, propensity, target_mask)[0]


def discriminator_loss_grad(d_flags, disc_prob):
    return _bce(np.asarray(d_flags, dtype=np.float64), disc_prob)


def discriminator_loss(d_flags, disc_prob) -> float:
    return discriminator_loss_grad(d_flags, disc_prob)[0]


def adversarial_loss_grad(disc_prob):
    p, inside = _clipped(disc_prob)
    n = p.shape[0]
    value = float(np.sum(np.log(1.0 - p))) / n
    grad = -1.0 / (1.0 - p) / n
    return value, np.where(inside, grad, 0.0)


def adversarial_loss(disc_prob) -> float:
    """(1/n) sum log(1 - D_hat), sign as in the weighted objective."""
    return adversarial_loss_grad(disc_prob)[0]


def reconstruction_loss_grad(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} does not match input {x.shape}")
    diff = x_hat - x
    value = float(np.sum(diff**2)) / diff.size
    return value, 2.0 * diff / diff.size


def reconstruction_loss(x, x_hat) -> float:
    return reconstruction_loss_grad(x, x_hat)[0]


def total_loss(terms: Sequence[float], weights: LossWeights, n_target: int = 0, n_rows: int = 0) -> LossBreakdown:
    """Weighted sum of (l_y, l_t, l_d, l_a, l_r)."""
    l_y, l_t, l_d, l_a, l_r = (float(v) for v in terms)
    a0, a1, a2, a3, a4 = weights.as_tuple()
    total = a0 * l_y + a1 * l_t + a2 * l_d + a3 * l_a + a4 * l_r
    return LossBreakdown(l_y, l_t, l_d, l_a, l_r, total, n_target=n_target, n_rows=n_rows)


def loss_gradients(
    output: ForwardOutput,
    covariates: np.ndarray,
    domain_flags: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    weights: LossWeights,
    active: Iterable[str] = TERMS,
    adversarial: str = "direct",
) -> Tuple[LossBreakdown, HeadGradients]:
    """
    Evaluate every term on one batch and return the weighted gradient of the
    ``active`` terms with respect to the network outputs.

    Terms of disabled heads evaluate to 0. ``t`` and ``y`` are only read on
    rows whose domain flag is 1.

    With ``adversarial="reversal"`` the l_a slot carries -a3 times the
    discriminator gradient instead of the gradient of l_a itself. The
    reported l_a value is unchanged.
    """
    active = set(active)
    unknown = active - set(TERMS)
    if unknown:
        raise BatleError(f"unknown loss terms {sorted(unknown)}")
    if adversarial not in ADVERSARIAL_MODES:
        raise BatleError(f"unknown adversarial gradient {adversarial!r}")
    flags = np.asarray(domain_flags)
    mask = flags == 1
    a0, a1, a2, a3, a4 = weights.as_tuple()
    upstream = HeadGradients()

    if output.sigma0 is None:
        l_y, (d_mu0, d_mu1) = squared_error_outcome_loss_grad(y, t, output.mu0, output.mu1, mask)
        outcome_grads = HeadGradients(mu0=d_mu0, mu1=d_mu1)
    else:
        l_y, (d_mu0, d_mu1, d_s0, d_s1) = gaussian_outcome_loss_grad(
            y, t, output.mu0, output.mu1, output.sigma0, output.sigma1, mask
        )
        outcome_grads = HeadGradients(mu0=d_mu0, mu1=d_mu1, sigma0=d_s0, sigma1=d_s1)
    if "l_y" in active:
        upstream = upstream + outcome_grads.scaled(a0)

    l_t, d_prop = propensity_loss_grad(t, output.propensity, mask)
    if "l_t" in active:
        upstream = upstream + HeadGradients(propensity=a1 * d_prop)

    l_d = l_a = 0.0
    if output.disc_prob is not None:
        l_d, d_disc = discriminator_loss_grad(flags, output.disc_prob)
        l_a, d_adv = adversarial_loss_grad(output.disc_prob)
        if "l_d" in active:
            upstream = upstream + HeadGradients(disc_prob=a2 * d_disc)
        if "l_a" in active:
            d_enc = -d_disc if adversarial == "reversal" else d_adv
            upstream = upstream + HeadGradients(disc_prob=a3 * d_enc)

    l_r = 0.0
    if output.reconstruction is not None:
        l_r, d_rec = reconstruction_loss_grad(covariates, output.reconstruction)
        if "l_r" in active:
            upstream = upstream + HeadGradients(reconstruction=a4 * d_rec)

    breakdown = total_loss((l_y, l_t, l_d, l_a, l_r), weights, n_target=int(mask.sum()), n_rows=flags.shape[0])
    return breakdown, upstream
