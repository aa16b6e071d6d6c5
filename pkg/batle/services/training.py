"""
Mini-batch training with alternating adversarial updates.

Per batch:
    discriminator phase  minimize a2 * l_d over the discriminator only
    main phase           minimize a0 l_y + a1 l_t + a3 l_a + a4 l_r over every
                         other block; gradients pass through d into f but d
                         itself is not updated

The encoder signal for l_a defaults to the reversed discriminator gradient
(``adversarial_gradient="reversal"``). Summed over a batch it vanishes when d
is at its optimum; the gradient of mean log(1 - D_hat) is -D_hat on every
row and never does. ``"direct"`` selects the latter.

With ``joint_objective`` the weighted total of all five terms is minimized
over every parameter in a single step instead.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from batle.config import LossWeights, NetworkConfig, TrainConfig
from batle.errors import DatasetError, NonFiniteActivationError, ShapeError, TrainingDivergedError
from batle.services.datasets import CombinedDataset
from batle.services.losses import TERMS, LossBreakdown, loss_gradients, total_loss
from batle.services.network import Gradients, Parameters, backward, forward, forward_with_cache, init_params
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "l_y", "l_t", "l_d", "l_a", "l_r", "total"]
MAIN_TERMS = ("l_y", "l_t", "l_a", "l_r")

INIT_STREAM, BATCH_STREAM, DROPOUT_STREAM, VALIDATION_STREAM = range(4)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Parameters,
    gradients: Gradients,
    state: AdamState,
    config: TrainConfig,
    keys: Optional[Iterable[str]] = None,
) -> Tuple[Parameters, AdamState]:
    """
    One bias-corrected Adam update of ``keys`` (default: every array).

    Returns new containers; arrays outside ``keys`` are shared with ``params``
    unchanged.
    """
    keys = list(params.keys()) if keys is None else list(keys)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    arrays = dict(params.arrays)
    m, v = dict(state.m), dict(state.v)
    for key in keys:
        g = gradients[key]
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient {key} has shape {g.shape}, parameter has {params[key].shape}")
        m[key] = b1 * m.get(key, 0.0) + (1.0 - b1) * g
        v[key] = b2 * v.get(key, 0.0) + (1.0 - b2) * g**2
        m_hat = m[key] / (1.0 - b1**t)
        v_hat = v[key] / (1.0 - b2**t)
        arrays[key] = params[key] - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return Parameters(params.config, arrays), AdamState(step=t, m=m, v=v)


@dataclass
class TrainHistory:
    train: List[LossBreakdown] = field(default_factory=list)
    validation: List[LossBreakdown] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train)

    def to_frame(self, split: str = "train") -> pd.DataFrame:
        records = self.train if split == "train" else self.validation
        rows = [(i + 1, *b.terms(), b.total) for i, b in enumerate(records)]
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def write_csv(self, path: Union[str, Path], split: str = "train") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame(split).to_csv(path, index=False)
        return path


def _mean_breakdown(batches: List[LossBreakdown], weights: LossWeights) -> LossBreakdown:
    terms = np.mean([b.terms() for b in batches], axis=0)
    return total_loss(
        terms,
        weights,
        n_target=sum(b.n_target for b in batches),
        n_rows=sum(b.n_rows for b in batches),
    )


def stratified_batches(target_rows: np.ndarray, source_rows: np.ndarray, batch_size: int, rng: np.random.Generator):
    """
    Shuffle each domain separately and deal both into the same number of
    batches, so every batch keeps the global target:source ratio and holds at
    least one target row.
    """
    target = rng.permutation(target_rows)
    source = rng.permutation(source_rows)
    n = target.size + source.size
    n_batches = max(1, min(int(np.ceil(n / batch_size)), target.size))
    return [
        np.concatenate([t_rows, s_rows])
        for t_rows, s_rows in zip(np.array_split(target, n_batches), np.array_split(source, n_batches))
    ]


def evaluate(params: Parameters, data: CombinedDataset, weights: LossWeights) -> LossBreakdown:
    """All five terms on ``data`` with dropout off."""
    rows = np.arange(data.n_rows)
    _, t, y = data.labels(rows)
    output = forward(params, data.covariates)
    breakdown, _ = loss_gradients(output, data.covariates, data.domain_flags, t, y, weights, active=())
    return breakdown


def _check_arms(treatments: np.ndarray, what: str) -> None:
    if treatments.size == 0:
        raise DatasetError(f"{what} has no target rows")
    if np.all(treatments == 1) or np.all(treatments == 0):
        arm = "treated" if treatments[0] == 1 else "control"
        raise DatasetError(f"{what} is all {arm}; need at least one treated and one control target row")


def _validation_split(data: CombinedDataset, fraction: float, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    target = data.target_rows()
    n_val = max(1, int(np.floor(target.size * fraction + 0.5)))
    if n_val >= target.size:
        raise DatasetError(f"{target.size} target rows are too few for a validation split")
    chosen = rng.generator.permutation(target)[:n_val]
    is_val = np.zeros(data.n_rows, dtype=bool)
    is_val[chosen] = True
    return np.flatnonzero(~is_val), np.sort(chosen)


@dataclass
class Batch:
    x: np.ndarray
    d: np.ndarray
    t: np.ndarray  # NaN on source rows
    y: np.ndarray

    @classmethod
    def from_rows(cls, data: CombinedDataset, rows: np.ndarray) -> "Batch":
        _, t, y = data.labels(rows)
        return cls(x=data.covariates[rows], d=data.domain_flags[rows], t=t, y=y)


def discriminator_phase(
    params: Parameters, state: AdamState, batch: Batch, config: TrainConfig, dropout_rng: Optional[RngStream]
) -> Tuple[Parameters, AdamState]:
    """One update of the discriminator on a2 * l_d; every other array is left untouched."""
    output, cache = forward_with_cache(params, batch.x, rng=dropout_rng)
    _, upstream = loss_gradients(output, batch.x, batch.d, batch.t, batch.y, config.weights, active=("l_d",))
    grads = backward(params, batch.x, upstream, masks=output.masks, blocks={"discriminator"}, into_shared=False, cache=cache)
    return adam_step(params, grads, state, config, keys=params.block_keys("discriminator"))


def main_phase(
    params: Parameters,
    state: AdamState,
    batch: Batch,
    config: TrainConfig,
    dropout_rng: Optional[RngStream],
    keys: List[str],
    terms: Iterable[str] = MAIN_TERMS,
) -> Tuple[Parameters, AdamState, LossBreakdown]:
    """One update of ``keys`` on the weighted ``terms``; the returned breakdown is measured before the step."""
    output, cache = forward_with_cache(params, batch.x, rng=dropout_rng)
    adversarial = "direct" if config.joint_objective else config.adversarial_gradient
    breakdown, upstream = loss_gradients(
        output, batch.x, batch.d, batch.t, batch.y, config.weights, active=terms, adversarial=adversarial
    )
    if not np.isfinite(breakdown.total):
        return params, state, breakdown
    grads = backward(params, batch.x, upstream, masks=output.masks, cache=cache)
    params, state = adam_step(params, grads, state, config, keys=keys)
    return params, state, breakdown


def train(
    config: TrainConfig,
    net_config: NetworkConfig,
    data: CombinedDataset,
    rng: RngStream,
) -> Tuple[Parameters, TrainHistory]:
    """
    Fit a network to ``data`` and return the final (or best, with early
    stopping) parameters and the per-epoch loss history.

    Raises:
        DatasetError: no rows, or the target rows are all treated / all control.
        TrainingDivergedError: a non-finite loss or activation, with the epoch.
    """
    if data.n_rows == 0:
        raise DatasetError("cannot train on an empty dataset")
    if data.n_features != net_config.input_dim:
        raise ShapeError(f"data has {data.n_features} covariates, network expects {net_config.input_dim}")
    _check_arms(data.target_treatments(), "training data")

    weights = config.weights
    params = init_params(net_config, rng.child(INIT_STREAM))
    batch_rng = rng.child(BATCH_STREAM).generator
    dropout_rng = rng.child(DROPOUT_STREAM)

    validation = None
    train_rows = np.arange(data.n_rows)
    if config.patience is not None:
        train_rows, val_rows = _validation_split(data, config.validation_fraction, rng.child(VALIDATION_STREAM))
        validation = data.subset(val_rows)
        _check_arms(data.subset(train_rows).target_treatments(), "training split")

    flags = data.domain_flags
    target_rows = train_rows[flags[train_rows] == 1]
    source_rows = train_rows[flags[train_rows] != 1]

    adversarial = params.has_block("discriminator") and not config.joint_objective
    disc_keys = set(params.block_keys("discriminator")) if adversarial else set()
    main_keys = [k for k in params.keys() if k not in disc_keys]
    main_terms = TERMS if config.joint_objective else MAIN_TERMS
    disc_state, main_state = AdamState(), AdamState()

    history = TrainHistory()
    best_params, best_score, waited = params, np.inf, 0

    for epoch in range(1, config.epochs + 1):
        batch_losses = []
        try:
            for rows in stratified_batches(target_rows, source_rows, config.batch_size, batch_rng):
                batch = Batch.from_rows(data, rows)
                for _ in range(config.disc_steps_per_batch if adversarial else 0):
                    params, disc_state = discriminator_phase(params, disc_state, batch, config, dropout_rng)
                params, main_state, breakdown = main_phase(
                    params, main_state, batch, config, dropout_rng, main_keys, main_terms
                )
                if not np.isfinite(breakdown.total):
                    raise TrainingDivergedError(epoch, f"loss {breakdown.total}")
                batch_losses.append(breakdown)
        except NonFiniteActivationError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from exc

        epoch_loss = _mean_breakdown(batch_losses, weights)
        history.train.append(epoch_loss)
        logger.debug("epoch %d: %s", epoch, {k: round(v, 5) for k, v in zip(TERMS, epoch_loss.terms())})

        if validation is None:
            continue
        val_loss = evaluate(params, validation, weights)
        history.validation.append(val_loss)
        # early stopping monitors the factual terms only
        score = weights.outcome * val_loss.l_y + weights.propensity * val_loss.l_t
        if score < best_score:
            best_params, best_score, waited = params, score, 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                history.stopped_early = True
                logger.info("Early stopping at epoch %d (best epoch %d)", epoch, history.best_epoch)
                break

    if validation is not None:
        params = best_params
    logger.info(
        "Trained %d epochs on %d target / %d source rows, final total loss %.5f",
        history.epochs, target_rows.size, source_rows.size, history.train[-1].total,
    )
    return params, history
