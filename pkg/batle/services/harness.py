"""
Experiment sweep: ratios x dataset replications x methods x model repetitions.

Random streams (all under the master seed):
    (DATA, d)                      dataset replication d
    (DATA, d, ratio_idx)           Setting-1 split / Setting-2 subsample
    (TRAIN, d, ratio_idx, m, method_idx)
                                   initialization, batching, dropout, MC passes

The Setting-1 split depends only on (d, ratio), so every method and model
repetition of a replication sees the same target/source partition.
"""
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError
from tqdm import tqdm

from batle.config import ExperimentConfig
from batle.errors import ConfigError
from batle.models import AggregateRow, RunRecord
from batle.services.baselines import aipw_estimate, make_preset
from batle.services.datasets import (
    DomainDataset,
    combine_domains,
    load_ihdp,
    read_domain_csv,
    split_setting1,
    subsample_to_ratio,
)
from batle.services.estimation import CI_METHOD, aggregate, estimate_from_params, mae
from batle.services.generators import generate_hcmnist, simulate_gwas
from batle.services.idx import load_mnist
from batle.services.network import save_checkpoint
from batle.services.numeric import RngStream
from batle.services.training import train

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["dataset_rep", "model_rep", "method", "r", "tau_true", "tau_hat", "mae", "wall_time_s", "seed", "status"]
AGGREGATE_COLUMNS = ["method", "r", "B", "mean_mae", "ci_low", "ci_high"]
TIMING_COLUMNS = ["dataset_rep", "model_rep", "method", "r", "wall_time_s"]

DATA_TAG, TRAIN_TAG = 0, 1
SPLIT_POLICY = "setting-1 split drawn once per (dataset replication, ratio); shared by all methods and model repetitions"

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED = 0, 2, 3


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(payload)


def validate_config(payload: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        problems = []
        for error in exc.errors():
            location = ".".join(str(part) for part in error["loc"]) or "config"
            if error["type"] == "extra_forbidden":
                problems.append(f"unknown key {location!r}")
            else:
                problems.append(f"{location}: {error['msg']}")
        raise ConfigError("; ".join(problems)) from exc


@dataclass
class RunTask:
    dataset_rep: int
    model_rep: int
    method: str
    method_idx: int
    ratio_idx: int
    ratio: float


@dataclass
class RunOutcome:
    record: RunRecord
    wall_time_s: float


@dataclass
class ExperimentResult:
    records: List[RunRecord]
    aggregates: List[AggregateRow]
    timings: List[Tuple[int, int, str, float, float]] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.records)

    @property
    def exit_code(self) -> int:
        return EXIT_RUN_FAILED if self.n_failed else EXIT_OK

    def results_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.records], columns=RESULT_COLUMNS)

    def aggregate_frame(self) -> pd.DataFrame:
        return pd.DataFrame([a.model_dump() for a in self.aggregates], columns=AGGREGATE_COLUMNS)


def load_replication(config: ExperimentConfig, d: int) -> Tuple[DomainDataset, Optional[DomainDataset]]:
    """
    Dataset replication ``d``: the labeled dataset to split (Setting 1), or
    the (target, source) pair (Setting 2).
    """
    rng = RngStream(config.master_seed, (DATA_TAG, d))
    if config.dataset == "gwas":
        return simulate_gwas(config.gwas, rng).dataset, None
    if config.dataset == "ihdp":
        return load_ihdp(config.ihdp_dir, d), None
    if config.dataset == "hcmnist":
        return generate_hcmnist(load_mnist(config.mnist_dir, "train"), config.hcmnist, rng)
    target = read_domain_csv(config.target_csv)
    source = read_domain_csv(config.source_csv) if config.source_csv is not None else None
    return target, source


def split_for_ratio(
    config: ExperimentConfig, labeled: DomainDataset, source: Optional[DomainDataset], d: int, ratio_idx: int
) -> Tuple[DomainDataset, DomainDataset]:
    rng = RngStream(config.master_seed, (DATA_TAG, d, ratio_idx))
    if config.setting == 1:
        if config.target_fractions is not None:
            p_t = config.target_fractions[ratio_idx]
        else:
            r = config.ratios[ratio_idx]
            p_t = r / (1.0 + r)
        return split_setting1(labeled, p_t, rng)
    return subsample_to_ratio(labeled, source, config.resolved_ratios()[ratio_idx], rng)


def training_stream(config: ExperimentConfig, task: RunTask) -> RngStream:
    return RngStream(config.master_seed, (TRAIN_TAG, task.dataset_rep, task.ratio_idx, task.model_rep, task.method_idx))


def _estimate(
    config: ExperimentConfig,
    task: RunTask,
    target: DomainDataset,
    source: DomainDataset,
    rng: RngStream,
    checkpoint_dir: Optional[Path],
) -> float:
    if task.method == "aipw":
        estimate = aipw_estimate(
            target.covariates,
            target.treatments,
            target.outcomes,
            folds=config.aipw_folds,
            rng=rng,
            ridge_penalty=config.ridge_penalty,
            logistic_penalty=config.logistic_penalty,
        )
        return estimate.tau_hat

    preset = make_preset(task.method, config.network, config.train.weights, config.mc_passes)
    data = combine_domains(target, source if preset.uses_source else None)
    train_config = config.train.model_copy(update={"weights": preset.weights})
    params, _ = train(train_config, preset.network.for_input(data.n_features), data, rng.child(0))
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / f"{task.method}_r{task.ratio_idx}_d{task.dataset_rep}_m{task.model_rep}.json", params)
    mc_rng = rng.child(1) if preset.mc_dropout else None
    return estimate_from_params(params, target.covariates, passes=preset.mc_passes, rng=mc_rng).tau_hat


def run_single(
    config: ExperimentConfig,
    task: RunTask,
    target: DomainDataset,
    source: DomainDataset,
    checkpoint_dir: Optional[Path] = None,
) -> RunOutcome:
    """
    One estimate. Baselines see only the labeled target split; causal_batle
    also sees the unlabeled source split. Failures are recorded, not raised.
    """
    rng = training_stream(config, task)
    tau_true = target.ground_truth.true_ate if target.ground_truth is not None else float("nan")
    started = time.perf_counter()
    try:
        tau_hat = _estimate(config, task, target, source, rng, checkpoint_dir)
        error = mae(tau_hat, tau_true)
        status = "ok"
    except Exception as exc:
        logger.warning(
            "Run %s d=%d m=%d r=%g failed: %s: %s",
            task.method, task.dataset_rep, task.model_rep, task.ratio, type(exc).__name__, exc,
        )
        tau_hat, error = float("nan"), float("nan")
        status = f"error:{type(exc).__name__}"
    elapsed = time.perf_counter() - started

    record = RunRecord(
        dataset_rep=task.dataset_rep,
        model_rep=task.model_rep,
        method=task.method,
        r=task.ratio,
        tau_true=tau_true,
        tau_hat=tau_hat,
        mae=error,
        wall_time_s=elapsed if config.record_wall_time else None,
        seed=rng.derived_seed(),
        status=status,
    )
    if status == "ok":
        logger.info(
            "%s d=%d m=%d r=%g: tau_hat=%.4f mae=%.4f",
            task.method, task.dataset_rep, task.model_rep, task.ratio, tau_hat, error,
        )
    return RunOutcome(record, elapsed)


def _failed(config: ExperimentConfig, task: RunTask, exc: Exception) -> RunOutcome:
    record = RunRecord(
        dataset_rep=task.dataset_rep,
        model_rep=task.model_rep,
        method=task.method,
        r=task.ratio,
        tau_true=float("nan"),
        tau_hat=float("nan"),
        mae=float("nan"),
        seed=training_stream(config, task).derived_seed(),
        status=f"error:{type(exc).__name__}",
    )
    return RunOutcome(record, 0.0)


def aggregate_records(records: List[RunRecord], config: ExperimentConfig) -> List[AggregateRow]:
    """Mean MAE and CI per (method, ratio) over the successful runs."""
    rows = []
    for method in config.methods:
        for r in config.resolved_ratios():
            maes = [rec.mae for rec in records if rec.method == method and rec.r == r and rec.ok]
            if not maes:
                rows.append(AggregateRow(method=method, r=r, B=0, mean_mae=np.nan, ci_low=np.nan, ci_high=np.nan))
                continue
            result = aggregate(maes, config.confidence)
            rows.append(
                AggregateRow(
                    method=method, r=r, B=result.B, mean_mae=result.mean_mae, ci_low=result.ci_low, ci_high=result.ci_high
                )
            )
    return rows


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: int = 1,
    save_checkpoints: bool = False,
) -> ExperimentResult:
    """
    Run the whole sweep and, with ``out_dir``, write results.csv,
    aggregate.csv, timings.csv, metadata.json and config.resolved.json.
    """
    out = Path(out_dir) if out_dir is not None else None
    checkpoint_dir = out / "checkpoints" if out is not None and save_checkpoints else None
    ratios = config.resolved_ratios()
    outcomes: List[RunOutcome] = []
    progress = tqdm(total=len(ratios) * config.b_d * len(config.methods) * config.b_m, desc="runs", disable=None)

    for d in range(config.b_d):
        try:
            labeled, source = load_replication(config, d)
            replication_error = None
        except Exception as exc:
            logger.error("Dataset replication %d failed: %s: %s", d, type(exc).__name__, exc)
            replication_error = exc

        for ratio_idx, ratio in enumerate(ratios):
            tasks = [
                RunTask(d, m, method, method_idx, ratio_idx, ratio)
                for method_idx, method in enumerate(config.methods)
                for m in range(config.b_m)
            ]
            split_error = replication_error
            if split_error is None:
                try:
                    target, source_split = split_for_ratio(config, labeled, source, d, ratio_idx)
                except Exception as exc:
                    logger.error("Split for d=%d r=%g failed: %s: %s", d, ratio, type(exc).__name__, exc)
                    split_error = exc
            if split_error is not None:
                outcomes.extend(_failed(config, task, split_error) for task in tasks)
            else:
                outcomes.extend(
                    Parallel(n_jobs=jobs)(
                        delayed(run_single)(config, task, target, source_split, checkpoint_dir) for task in tasks
                    )
                )
            progress.update(len(tasks))
    progress.close()

    ratio_order = {r: i for i, r in enumerate(ratios)}
    method_order = {m: i for i, m in enumerate(config.methods)}
    outcomes.sort(
        key=lambda o: (ratio_order[o.record.r], o.record.dataset_rep, method_order[o.record.method], o.record.model_rep)
    )
    records = [o.record for o in outcomes]
    result = ExperimentResult(
        records=records,
        aggregates=aggregate_records(records, config),
        timings=[(o.record.dataset_rep, o.record.model_rep, o.record.method, o.record.r, o.wall_time_s) for o in outcomes],
    )
    if out is not None:
        write_outputs(result, config, out)
    logger.info("Sweep finished: %d runs, %d failed", len(records), result.n_failed)
    return result


def write_outputs(result: ExperimentResult, config: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.results_frame().to_csv(out / "results.csv", index=False)
    result.aggregate_frame().to_csv(out / "aggregate.csv", index=False)
    pd.DataFrame(result.timings, columns=TIMING_COLUMNS).to_csv(out / "timings.csv", index=False)
    (out / "config.resolved.json").write_text(json.dumps(config.model_dump(mode="json"), indent=2))
    (out / "metadata.json").write_text(json.dumps(run_metadata(config, result), indent=2))


def run_metadata(config: ExperimentConfig, result: ExperimentResult) -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "platform": platform.platform(),
        "setting": config.setting,
        "repetitions_per_cell": config.repetitions,
        "confidence": config.confidence,
        "ci_method": CI_METHOD,
        "split_policy": SPLIT_POLICY,
        "n_runs": len(result.records),
        "n_failed": result.n_failed,
    }
