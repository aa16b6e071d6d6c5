"""
MC-dropout prediction of the potential outcomes, the ATE, MAE and the
aggregation of repeated estimates into a mean with a confidence interval.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from batle.errors import BatleError
from batle.services.network import Parameters, forward
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

CI_METHOD = "normal approximation: mean +/- z((1+c)/2) * sd / sqrt(B), sd with ddof=1"


@dataclass
class McPrediction:
    mu0: np.ndarray
    mu1: np.ndarray
    sd0: np.ndarray  # across-pass standard deviation of mu0
    sd1: np.ndarray
    passes: int
    sigma0: Optional[np.ndarray] = None  # mean predicted sigma, diagnostic only
    sigma1: Optional[np.ndarray] = None


@dataclass
class AteEstimate:
    tau_hat: float
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    mc_passes: int = 1
    sd0: Optional[np.ndarray] = None
    sd1: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.mu0_hat.shape[0]

    def summary(self) -> dict:
        return {
            "tau_hat": self.tau_hat,
            "n": self.n,
            "mc_passes": self.mc_passes,
            "mean_sd0": None if self.sd0 is None else float(np.mean(self.sd0)),
            "mean_sd1": None if self.sd1 is None else float(np.mean(self.sd1)),
        }


@dataclass
class AggregateResult:
    mean_mae: float
    ci_low: float
    ci_high: float
    B: int
    sd: float
    confidence: float
    ci_method: str = CI_METHOD
    maes: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def predict_mc_dropout(
    params: Parameters,
    covariates: np.ndarray,
    passes: int = 30,
    rng: Optional[RngStream] = None,
) -> McPrediction:
    """
    Average the outcome-head means over ``passes`` forward passes with fresh
    dropout masks. Without ``rng``, or with a zero dropout rate, every pass
    is the dropout-off pass and the spread is exactly 0.
    """
    if passes < 1:
        raise BatleError(f"passes must be >= 1, got {passes}")
    if rng is None or params.config.dropout_rate == 0:
        output = forward(params, covariates)
        zeros = np.zeros_like(output.mu0)
        return McPrediction(output.mu0, output.mu1, zeros, zeros.copy(), passes, output.sigma0, output.sigma1)

    mu0 = np.empty((passes, len(covariates)))
    mu1 = np.empty_like(mu0)
    sigmas = []
    for k in range(passes):
        output = forward(params, covariates, rng=rng)
        mu0[k], mu1[k] = output.mu0, output.mu1
        if output.sigma0 is not None:
            sigmas.append((output.sigma0, output.sigma1))
    sigma0 = np.mean([s[0] for s in sigmas], axis=0) if sigmas else None
    sigma1 = np.mean([s[1] for s in sigmas], axis=0) if sigmas else None
    return McPrediction(
        mu0=mu0.mean(axis=0),
        mu1=mu1.mean(axis=0),
        sd0=mu0.std(axis=0),
        sd1=mu1.std(axis=0),
        passes=passes,
        sigma0=sigma0,
        sigma1=sigma1,
    )


def estimate_ate(
    mu0_hat: np.ndarray,
    mu1_hat: np.ndarray,
    mc_passes: int = 1,
    sd0: Optional[np.ndarray] = None,
    sd1: Optional[np.ndarray] = None,
) -> AteEstimate:
    """tau_hat = mean(mu1_hat - mu0_hat)."""
    mu0_hat = np.asarray(mu0_hat, dtype=np.float64)
    mu1_hat = np.asarray(mu1_hat, dtype=np.float64)
    if mu0_hat.size == 0:
        raise BatleError("cannot estimate an ATE from zero rows")
    if mu0_hat.shape != mu1_hat.shape:
        raise BatleError(f"mu0_hat {mu0_hat.shape} and mu1_hat {mu1_hat.shape} differ in length")
    tau_hat = float(np.mean(mu1_hat - mu0_hat))
    return AteEstimate(tau_hat, mu0_hat, mu1_hat, mc_passes=mc_passes, sd0=sd0, sd1=sd1)


def estimate_from_params(
    params: Parameters, covariates: np.ndarray, passes: int = 30, rng: Optional[RngStream] = None
) -> AteEstimate:
    """MC-dropout prediction on ``covariates`` followed by ``estimate_ate``."""
    prediction = predict_mc_dropout(params, covariates, passes=passes, rng=rng)
    return estimate_ate(prediction.mu0, prediction.mu1, prediction.passes, prediction.sd0, prediction.sd1)


def mae(tau_hat: float, tau_true: float) -> float:
    return abs(float(tau_hat) - float(tau_true))


def aggregate(maes: Sequence[float], confidence: float = 0.95) -> AggregateResult:
    """Mean MAE over B repetitions with a normal-approximation confidence interval."""
    values = np.asarray(maes, dtype=np.float64)
    B = values.size
    if B == 0:
        raise BatleError("cannot aggregate zero runs")
    if not 0 < confidence < 1:
        raise BatleError(f"confidence must lie in (0, 1), got {confidence}")
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if B > 1 else 0.0
    half = float(norm.ppf((1.0 + confidence) / 2.0)) * sd / np.sqrt(B)
    return AggregateResult(
        mean_mae=mean,
        ci_low=mean - half,
        ci_high=mean + half,
        B=B,
        sd=sd,
        confidence=confidence,
        maes=values,
    )
