"""
Dataset containers for the target/source setup, Setting-1 splitting,
Setting-2 ratio control, domain combination, IHDP ingestion and CSV export.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from batle.config import IHDP_REPLICATIONS
from batle.errors import DataFormatError, DatasetError, MaskedLabelError
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

IHDP_COLUMNS = ["treatment", "y_factual", "y_cfactual", "mu0", "mu1"]
COVARIATE_PATTERN = re.compile(r"x_?\d+")


class Domain(IntEnum):
    SOURCE = 0
    TARGET = 1


@dataclass
class GroundTruth:
    true_ate: float
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None

    @classmethod
    def from_potentials(cls, mu0: np.ndarray, mu1: np.ndarray) -> "GroundTruth":
        mu0 = np.asarray(mu0, dtype=np.float64)
        mu1 = np.asarray(mu1, dtype=np.float64)
        return cls(true_ate=float(np.mean(mu1 - mu0)), mu0=mu0, mu1=mu1)

    @property
    def has_potentials(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    def subset(self, rows: np.ndarray) -> "GroundTruth":
        # without per-sample potentials the effect is constant across rows
        if not self.has_potentials:
            return GroundTruth(self.true_ate)
        return GroundTruth.from_potentials(self.mu0[rows], self.mu1[rows])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "true_ate": self.true_ate,
            "mu0": None if self.mu0 is None else self.mu0.tolist(),
            "mu1": None if self.mu1 is None else self.mu1.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GroundTruth":
        if payload.get("mu0") is not None and payload.get("mu1") is not None:
            truth = cls.from_potentials(np.asarray(payload["mu0"]), np.asarray(payload["mu1"]))
            truth.true_ate = float(payload["true_ate"])
            return truth
        return cls(float(payload["true_ate"]))


@dataclass
class DomainDataset:
    """Covariates of one domain; target rows carry (T, Y), source rows carry neither."""

    covariates: np.ndarray
    treatments: Optional[np.ndarray] = None
    outcomes: Optional[np.ndarray] = None
    domain: Domain = Domain.TARGET
    ground_truth: Optional[GroundTruth] = None
    row_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim != 2:
            raise DatasetError(f"covariates must be a matrix, got shape {self.covariates.shape}")
        self.domain = Domain(self.domain)
        n = self.covariates.shape[0]
        if (self.treatments is None) != (self.outcomes is None):
            raise DatasetError("treatments and outcomes must be both present or both absent")
        if self.treatments is not None:
            if self.domain is Domain.SOURCE:
                raise DatasetError("source-domain rows cannot carry treatments or outcomes")
            self.treatments = np.asarray(self.treatments, dtype=np.float64)
            self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
            if self.treatments.shape != (n,) or self.outcomes.shape != (n,):
                raise DatasetError(f"label vectors must have length {n}")
            if not np.all((self.treatments == 0) | (self.treatments == 1)):
                raise DatasetError("treatments must be binary (0/1)")
        if self.row_index is None:
            self.row_index = np.arange(n)

    @property
    def n_rows(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_features(self) -> int:
        return self.covariates.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.treatments is not None

    def subset(self, rows: np.ndarray) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return DomainDataset(
            covariates=self.covariates[rows],
            treatments=None if self.treatments is None else self.treatments[rows],
            outcomes=None if self.outcomes is None else self.outcomes[rows],
            domain=self.domain,
            ground_truth=None if self.ground_truth is None else self.ground_truth.subset(rows),
            row_index=self.row_index[rows],
        )

    def unlabeled(self) -> "DomainDataset":
        """The same covariates as a source-domain dataset (labels removed)."""
        return DomainDataset(covariates=self.covariates, domain=Domain.SOURCE, row_index=self.row_index)


@dataclass
class CombinedDataset:
    """
    Target rows followed by source rows with the domain indicator D.

    Treatment/outcome storage for source rows holds NaN and is never handed
    out: ``labels`` fills source positions without reading them and the
    per-row accessors raise ``MaskedLabelError``.
    """

    covariates: np.ndarray
    domain_flags: np.ndarray
    treatment_store: np.ndarray = field(repr=False)
    outcome_store: np.ndarray = field(repr=False)
    ground_truth: Optional[GroundTruth] = None

    @property
    def label_mask(self) -> np.ndarray:
        return self.domain_flags == 1

    @property
    def n_rows(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_features(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_target(self) -> int:
        return int(self.label_mask.sum())

    @property
    def n_source(self) -> int:
        return self.n_rows - self.n_target

    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.label_mask)

    def labels(self, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mask, t, y) for ``rows``; t and y are NaN where the mask is false."""
        rows = np.asarray(rows, dtype=np.int64)
        mask = self.domain_flags[rows] == 1
        t = np.full(rows.shape[0], np.nan)
        y = np.full(rows.shape[0], np.nan)
        labelled = rows[mask]
        t[mask] = self.treatment_store[labelled]
        y[mask] = self.outcome_store[labelled]
        return mask, t, y

    def _check_label_row(self, row: int) -> None:
        if self.domain_flags[row] != 1:
            raise MaskedLabelError(f"row {row} belongs to the source domain and carries no labels")

    def treatment_at(self, row: int) -> float:
        self._check_label_row(row)
        return float(self.treatment_store[row])

    def outcome_at(self, row: int) -> float:
        self._check_label_row(row)
        return float(self.outcome_store[row])

    def target_covariates(self) -> np.ndarray:
        return self.covariates[self.label_mask]

    def target_treatments(self) -> np.ndarray:
        return self.treatment_store[self.target_rows()]

    def target_outcomes(self) -> np.ndarray:
        return self.outcome_store[self.target_rows()]

    def subset(self, rows: np.ndarray) -> "CombinedDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return CombinedDataset(
            covariates=self.covariates[rows],
            domain_flags=self.domain_flags[rows],
            treatment_store=self.treatment_store[rows],
            outcome_store=self.outcome_store[rows],
            ground_truth=self.ground_truth,
        )


def combine_domains(target: DomainDataset, source: Optional[DomainDataset] = None) -> CombinedDataset:
    """Stack target rows (D=1) over source rows (D=0)."""
    if target.domain is not Domain.TARGET or not target.is_labeled:
        raise DatasetError("combine_domains expects a labeled target-domain dataset first")
    if source is not None and source.domain is not Domain.SOURCE:
        raise DatasetError("combine_domains expects an unlabeled source-domain dataset second")
    if source is not None and source.n_rows and source.n_features != target.n_features:
        raise DatasetError(
            f"feature spaces differ: target has {target.n_features} covariates, source has "
            f"{source.n_features}; both domains must share the same feature space"
        )

    n_source = 0 if source is None else source.n_rows
    covariates = target.covariates if not n_source else np.vstack([target.covariates, source.covariates])
    flags = np.concatenate([np.ones(target.n_rows, dtype=np.int8), np.zeros(n_source, dtype=np.int8)])
    padding = np.full(n_source, np.nan)
    return CombinedDataset(
        covariates=covariates,
        domain_flags=flags,
        treatment_store=np.concatenate([target.treatments, padding]),
        outcome_store=np.concatenate([target.outcomes, padding]),
        ground_truth=target.ground_truth,
    )


def fraction_to_ratio(p_t: float) -> float:
    return p_t / (1.0 - p_t)


def ratio_to_fraction(r: float) -> float:
    return r / (1.0 + r)


def split_setting1(dataset: DomainDataset, p_t: float, rng: RngStream) -> Tuple[DomainDataset, DomainDataset]:
    """
    Uniformly random split of one labeled dataset: round(n * p_t) rows keep
    their labels as the target domain, the rest become an unlabeled source.
    """
    if not 0 < p_t < 1:
        raise DatasetError(f"target fraction must lie in (0, 1), got {p_t}")
    if not dataset.is_labeled:
        raise DatasetError("setting 1 splits a labeled dataset")
    n = dataset.n_rows
    n_target = int(np.floor(n * p_t + 0.5))
    if n_target == 0 or n_target == n:
        raise DatasetError(f"p_t={p_t} on {n} rows leaves one side of the split empty")

    order = rng.generator.permutation(n)
    target_rows = np.sort(order[:n_target])
    source_rows = np.sort(order[n_target:])
    return dataset.subset(target_rows), dataset.subset(source_rows).unlabeled()


def subsample_to_ratio(
    target: DomainDataset, source: DomainDataset, ratio: float, rng: RngStream
) -> Tuple[DomainDataset, DomainDataset]:
    """Subsample one side so that n_t / n_s == ratio while keeping as many rows as possible."""
    if not ratio > 0:
        raise DatasetError(f"ratio must be positive, got {ratio}")
    if target.n_rows == 0 or source.n_rows == 0:
        raise DatasetError("setting 2 needs non-empty target and source datasets")
    generator = rng.generator
    if target.n_rows / source.n_rows >= ratio:
        n_target = int(np.floor(ratio * source.n_rows + 0.5))
        n_source = source.n_rows
    else:
        n_target = target.n_rows
        n_source = int(np.floor(target.n_rows / ratio + 0.5))
    if n_target == 0 or n_source == 0:
        raise DatasetError(f"ratio {ratio} leaves an empty domain")
    target_rows = np.sort(generator.choice(target.n_rows, size=n_target, replace=False))
    source_rows = np.sort(generator.choice(source.n_rows, size=n_source, replace=False))
    return target.subset(target_rows), source.subset(source_rows)


def _ihdp_file(path: Path, replication: int) -> Path:
    if path.is_dir():
        return path / f"ihdp_npci_{replication + 1}.csv"
    return path


def load_ihdp(path: Union[str, Path], replication: int = 0) -> DomainDataset:
    """
    Load one IHDP replication.

    ``path`` is either a directory holding ``ihdp_npci_<k>.csv`` (k = replication + 1)
    or the CSV itself. Expected columns: treatment, y_factual, y_cfactual, mu0, mu1,
    x1..xP; files without a header row are read with that column order.
    """
    if not 0 <= replication < IHDP_REPLICATIONS:
        raise DatasetError(f"IHDP replication must lie in [0, {IHDP_REPLICATIONS}), got {replication}")
    file = _ihdp_file(Path(path), replication)
    if not file.exists():
        raise DataFormatError(f"IHDP file not found: {file}")

    frame = pd.read_csv(file)
    try:
        float(frame.columns[0])
        headerless = True
    except ValueError:
        headerless = False
    if headerless:
        frame = pd.read_csv(file, header=None)
        n_covariates = frame.shape[1] - len(IHDP_COLUMNS)
        frame.columns = IHDP_COLUMNS + [f"x{i}" for i in range(1, n_covariates + 1)]

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in IHDP_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"{file}: missing columns {missing}")
    unexpected = [c for c in frame.columns if c not in IHDP_COLUMNS and not COVARIATE_PATTERN.fullmatch(c)]
    if unexpected:
        raise DataFormatError(f"{file}: unexpected columns {unexpected}")
    x_columns = [c for c in frame.columns if COVARIATE_PATTERN.fullmatch(c)]
    if not x_columns:
        raise DataFormatError(f"{file}: no covariate columns")
    treatment = frame["treatment"].to_numpy(dtype=np.float64)
    if not np.all((treatment == 0) | (treatment == 1)):
        raise DataFormatError(f"{file}: column treatment must be binary")

    logger.info("Loaded IHDP replication %d: %d rows, %d covariates", replication, len(frame), len(x_columns))
    return DomainDataset(
        covariates=frame[x_columns].to_numpy(dtype=np.float64),
        treatments=treatment,
        outcomes=frame["y_factual"].to_numpy(dtype=np.float64),
        domain=Domain.TARGET,
        ground_truth=GroundTruth.from_potentials(frame["mu0"].to_numpy(), frame["mu1"].to_numpy()),
    )


def sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def write_domain_csv(dataset: DomainDataset, path: Union[str, Path], config: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write ``d,t,y,x_0..x_{V-1}`` (t and y empty on source rows) plus a JSON
    sidecar with the ground truth and the generating config.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.covariates, columns=[f"x_{i}" for i in range(dataset.n_features)])
    n = dataset.n_rows
    if dataset.is_labeled:
        t = pd.array(dataset.treatments.astype(np.int64), dtype="Int64")
        y = dataset.outcomes
    else:
        t = pd.array([pd.NA] * n, dtype="Int64")
        y = np.full(n, np.nan)
    frame.insert(0, "y", y)
    frame.insert(0, "t", t)
    frame.insert(0, "d", np.full(n, int(dataset.domain), dtype=np.int64))
    frame.to_csv(path, index=False, na_rep="")

    sidecar = {
        "domain": dataset.domain.name.lower(),
        "n_rows": n,
        "n_features": dataset.n_features,
        "ground_truth": None if dataset.ground_truth is None else dataset.ground_truth.to_dict(),
        "config": config,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    return path


def read_domain_csv(path: Union[str, Path]) -> DomainDataset:
    """Re-ingest a CSV written by ``write_domain_csv`` (sidecar optional)."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns[:3]) != ["d", "t", "y"]:
        raise DataFormatError(f"{path}: header must start with d,t,y, found {list(frame.columns[:3])}")
    x_columns = list(frame.columns[3:])
    expected = [f"x_{i}" for i in range(len(x_columns))]
    if x_columns != expected or not x_columns:
        raise DataFormatError(f"{path}: covariate columns must be x_0..x_{{V-1}}")

    flags = frame["d"].to_numpy()
    if len(np.unique(flags)) > 1:
        raise DataFormatError(f"{path}: mixes domains; write one file per domain")
    domain = Domain(int(flags[0])) if len(flags) else Domain.TARGET
    t_missing = frame["t"].isna().to_numpy()
    y_missing = frame["y"].isna().to_numpy()
    if not (np.array_equal(t_missing, y_missing) and (t_missing.all() or not t_missing.any())):
        raise DataFormatError(f"{path}: t and y must be both filled (target) or both empty (source)")
    labeled = len(frame) > 0 and not t_missing.any()

    truth = None
    sidecar = sidecar_path(path)
    if sidecar.exists():
        payload = json.loads(sidecar.read_text())
        if payload.get("ground_truth"):
            truth = GroundTruth.from_dict(payload["ground_truth"])

    return DomainDataset(
        covariates=frame[x_columns].to_numpy(dtype=np.float64),
        treatments=frame["t"].to_numpy(dtype=np.float64) if labeled else None,
        outcomes=frame["y"].to_numpy(dtype=np.float64) if labeled else None,
        domain=domain,
        ground_truth=truth,
    )
