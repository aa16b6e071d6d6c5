"""
Baselines evaluated by the same harness as the main model.

    causal_batle        full model (reference configuration)
    bayesian_dragonnet  same backbone, transfer heads off, a2 = a3 = a4 = 0
    dragonnet           additionally point outcome heads with squared error,
                        a single dropout-off prediction pass
    aipw                cross-fitted doubly-robust estimator with logistic
                        propensity and per-arm ridge outcome models
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.model_selection import StratifiedKFold

from batle.config import BackboneConfig, LossWeights
from batle.errors import ConfigError, DatasetError
from batle.services.estimation import AteEstimate
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

NETWORK_METHODS = ("causal_batle", "bayesian_dragonnet", "dragonnet")
PROPENSITY_CLIP = (0.01, 0.99)
AIPW_MIN_ROWS = 20


@dataclass(frozen=True)
class ModelPreset:
    name: str
    network: BackboneConfig
    weights: LossWeights
    mc_passes: int
    mc_dropout: bool = True
    uses_source: bool = True


def make_preset(
    name: str,
    base: Optional[BackboneConfig] = None,
    weights: Optional[LossWeights] = None,
    mc_passes: int = 30,
) -> ModelPreset:
    """Derive a method's network and loss weights from the base configuration."""
    base = base or BackboneConfig()
    weights = weights or LossWeights()
    if name == "causal_batle":
        return ModelPreset(name, base, weights, mc_passes)

    if name not in NETWORK_METHODS:
        raise ConfigError(f"unknown method {name!r}; valid network presets are {', '.join(NETWORK_METHODS)}")
    network = base.model_copy(update={"discriminator_enabled": False, "reconstruction_enabled": False})
    reduced = weights.model_copy(update={"discriminator": 0.0, "adversarial": 0.0, "reconstruction": 0.0})
    if name == "bayesian_dragonnet":
        return ModelPreset(name, network, reduced, mc_passes, uses_source=False)
    return ModelPreset(
        name,
        network.model_copy(update={"point_outcomes": True}),
        reduced,
        mc_passes=1,
        mc_dropout=False,
        uses_source=False,
    )


def aipw_from_nuisances(
    t: np.ndarray,
    y: np.ndarray,
    e_hat: np.ndarray,
    mu0_hat: np.ndarray,
    mu1_hat: np.ndarray,
    clip: Tuple[float, float] = PROPENSITY_CLIP,
) -> AteEstimate:
    """
    Doubly-robust combination of given nuisances:

        psi1 = mu1 + t (y - mu1) / e
        psi0 = mu0 + (1 - t)(y - mu0) / (1 - e)
        tau  = mean(psi1 - psi0)

    with e clipped to ``clip``. The estimate's per-sample vectors are the
    pseudo-outcomes (psi0, psi1).
    """
    t, y = np.asarray(t, dtype=np.float64), np.asarray(y, dtype=np.float64)
    e = np.clip(np.asarray(e_hat, dtype=np.float64), *clip)
    mu0_hat = np.asarray(mu0_hat, dtype=np.float64)
    mu1_hat = np.asarray(mu1_hat, dtype=np.float64)
    psi1 = mu1_hat + t * (y - mu1_hat) / e
    psi0 = mu0_hat + (1.0 - t) * (y - mu0_hat) / (1.0 - e)
    return AteEstimate(tau_hat=float(np.mean(psi1 - psi0)), mu0_hat=psi0, mu1_hat=psi1)


def fit_propensity(covariates: np.ndarray, t: np.ndarray, penalty: float = 1.0) -> LogisticRegression:
    """L2-penalized logistic regression (unpenalized intercept) fitted to tight tolerance."""
    model = LogisticRegression(C=1.0 / penalty, solver="lbfgs", tol=1e-10, max_iter=10000)
    return model.fit(covariates, t.astype(np.int64))


def propensity_gradient(model: LogisticRegression, covariates: np.ndarray, t: np.ndarray, penalty: float) -> np.ndarray:
    """Gradient of (1/n) sum log-loss + penalty/(2n) ||w||^2 at the fitted coefficients."""
    n = covariates.shape[0]
    p = model.predict_proba(covariates)[:, 1]
    resid = p - t
    grad_w = covariates.T @ resid / n + penalty * model.coef_[0] / n
    grad_b = resid.mean()
    return np.concatenate([grad_w, [grad_b]])


def fit_outcome(covariates: np.ndarray, y: np.ndarray, penalty: float = 1.0) -> Ridge:
    return Ridge(alpha=penalty, fit_intercept=True).fit(covariates, y)


def _canonical_order(covariates: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Content-based row order, so fold assignment does not depend on input order."""
    keys = [covariates[:, j] for j in range(covariates.shape[1] - 1, -1, -1)] + [y, t]
    return np.lexsort(keys)


def aipw_estimate(
    covariates: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    folds: int = 2,
    rng: Optional[RngStream] = None,
    ridge_penalty: float = 1.0,
    logistic_penalty: float = 1.0,
) -> AteEstimate:
    """
    Cross-fitted AIPW: nuisances for each fold are fitted on the other folds.

    Raises:
        DatasetError: fewer than 20 rows, non-binary treatments, single-arm data,
            or an arm too small to appear in every fold.
    """
    covariates = np.asarray(covariates, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = covariates.shape[0]
    if n < AIPW_MIN_ROWS:
        raise DatasetError(f"AIPW needs at least {AIPW_MIN_ROWS} rows, got {n}")
    if not np.all(np.isin(t, (0.0, 1.0))):
        bad = np.unique(t[~np.isin(t, (0.0, 1.0))])
        raise DatasetError(f"treatments must be 0 or 1, found {bad[:5].tolist()}")
    counts: Dict[int, int] = {arm: int(np.sum(t == arm)) for arm in (0, 1)}
    if min(counts.values()) == 0:
        raise DatasetError("AIPW needs both treatment arms; the data is single-arm")
    if min(counts.values()) < folds:
        raise DatasetError(f"each arm needs at least {folds} rows for {folds}-fold cross-fitting, got {counts}")

    rng = rng or RngStream(0)
    order = _canonical_order(covariates, t, y)
    x_s, t_s, y_s = covariates[order], t[order], y[order]
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=int(rng.generator.integers(2**31 - 1)))

    e_hat, mu0_hat, mu1_hat = np.empty(n), np.empty(n), np.empty(n)
    for train_idx, test_idx in splitter.split(x_s, t_s.astype(np.int64)):
        x_train, t_train, y_train = x_s[train_idx], t_s[train_idx], y_s[train_idx]
        e_hat[test_idx] = fit_propensity(x_train, t_train, logistic_penalty).predict_proba(x_s[test_idx])[:, 1]
        for arm, target in ((0, mu0_hat), (1, mu1_hat)):
            rows = t_train == arm
            target[test_idx] = fit_outcome(x_train[rows], y_train[rows], ridge_penalty).predict(x_s[test_idx])

    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    estimate = aipw_from_nuisances(t, y, e_hat[inverse], mu0_hat[inverse], mu1_hat[inverse])
    logger.info("AIPW (%d folds) on %d rows: tau_hat=%.4f", folds, n, estimate.tau_hat)
    return estimate
