"""
Semi-synthetic benchmark generators.

GWAS: genotypes drawn from allele frequencies F = Gamma x S where S holds the
top principal components of a reference panel plus an intercept row; one SNP
is the binary treatment, k-means clusters supply confounding intercepts and
heteroscedastic noise, rescaled to fixed variance shares.

HCMNIST: each target-digit image is mapped to a scalar phi from its mean
intensity; T and Y follow closed-form laws of phi, other digits form the
unlabeled source domain.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from batle.config import GwasConfig, HcmnistConfig
from batle.errors import DataFormatError, DatasetError
from batle.services.datasets import Domain, DomainDataset, GroundTruth
from batle.services.idx import ImageSet
from batle.services.numeric import (
    RngStream,
    clip,
    kmeans,
    pca_fit,
    sample_inv_gamma,
    sigmoid,
    standardize,
)

logger = logging.getLogger(__name__)


@dataclass
class GwasSimulation:
    dataset: DomainDataset
    coefficients: np.ndarray  # tau_i over the retained SNPs, one nonzero entry
    treatment_column: int
    gene_term: np.ndarray
    group_term: np.ndarray
    noise: np.ndarray
    clusters: np.ndarray
    kept_snps: np.ndarray


def reference_panel(config: GwasConfig, rng: RngStream) -> np.ndarray:
    """The matrix the PCA runs on: a CSV panel when configured, else Uniform(low, high) draws."""
    if config.reference_panel_path is None:
        return rng.generator.uniform(config.panel_low, config.panel_high, size=(config.panel_rows, config.n_snps))

    path = Path(config.reference_panel_path)
    if not path.exists():
        raise DataFormatError(f"reference panel not found: {path}")
    frame = pd.read_csv(path, header=None)
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    if len(numeric) and numeric.iloc[0].isna().all():
        numeric = numeric.iloc[1:]
    if numeric.isna().to_numpy().any():
        raise DataFormatError(f"{path}: reference panel must be numeric")
    panel = numeric.to_numpy(dtype=np.float64)
    if panel.shape[1] != config.n_snps:
        raise DataFormatError(f"{path}: panel has {panel.shape[1]} SNP columns, config expects {config.n_snps}")
    return panel


def prune_linkage(panel: np.ndarray, threshold: float = 0.95, window: int = 100) -> np.ndarray:
    """
    Greedy LD pruning: walking left to right, each retained column removes the
    columns among its next ``window`` neighbours whose |Pearson r| exceeds
    ``threshold``. Returns the indices of retained columns.
    """
    n_rows, n_cols = panel.shape
    sd = panel.std(axis=0)
    z = np.divide(panel - panel.mean(axis=0), sd, out=np.zeros_like(panel), where=sd > 0)
    keep = np.ones(n_cols, dtype=bool)
    for j in range(n_cols - 1):
        if not keep[j]:
            continue
        stop = min(n_cols, j + 1 + window)
        correlation = z[:, j] @ z[:, j + 1 : stop] / n_rows
        neighbours = keep[j + 1 : stop]
        neighbours[np.abs(correlation) > threshold] = False
    return np.flatnonzero(keep)


def simulate_gwas(config: GwasConfig, rng: RngStream) -> GwasSimulation:
    """Generate the GWAS target dataset with one binary SNP as treatment."""
    J, L = config.n_samples, config.n_components

    panel = reference_panel(config, rng.child(0))
    kept = prune_linkage(panel, config.ld_threshold, config.ld_window)
    if kept.size < panel.shape[1]:
        logger.info("LD pruning kept %d of %d SNPs", kept.size, panel.shape[1])
    panel = panel[:, kept]
    V = panel.shape[1]
    if L > V:
        raise DatasetError(f"{V} SNPs left after pruning, fewer than {L} components")

    pca = pca_fit(panel, L)
    S = np.vstack([pca.components, np.ones((1, V))])

    loadings = np.empty((J, L + 1))
    loadings[:, :L] = config.gamma_scale * rng.child(1).generator.uniform(0.0, config.gamma_upper, size=(J, L))
    loadings[:, L] = config.gamma_intercept
    frequencies = clip(loadings @ S, config.frequency_clip, 1.0 - config.frequency_clip)

    genotypes = rng.child(2).generator.binomial(1, frequencies).astype(np.float64)
    del frequencies

    varying = np.flatnonzero(genotypes.std(axis=0) > 0)
    if varying.size == 0:
        raise DatasetError("every simulated SNP is constant; increase n_samples")
    treatment_rng = rng.child(3).generator
    v = int(varying[treatment_rng.integers(varying.size)])
    tau_v = 0.0
    while tau_v == 0.0:
        tau_v = float(treatment_rng.normal(0.0, config.tau_sd))
    coefficients = np.zeros(V)
    coefficients[v] = tau_v
    gene = genotypes @ coefficients

    clustering = kmeans(genotypes, config.n_clusters, rng.child(4))
    clusters = clustering.assignments
    noise_rng = rng.child(5)
    intercepts = noise_rng.generator.normal(0.0, 1.0, size=config.n_clusters)
    sigmas = sample_inv_gamma(config.inv_gamma_shape, config.inv_gamma_scale, rng.child(6), size=config.n_clusters)
    group = intercepts[clusters]
    noise = noise_rng.generator.normal(0.0, 1.0, size=J) * sigmas[clusters]

    sd_gene, sd_group, sd_noise = gene.std(), group.std(), noise.std()
    if sd_gene == 0 or sd_group == 0 or sd_noise == 0:
        raise DatasetError("degenerate GWAS components (zero variance); use more samples or clusters")
    base = sd_gene / np.sqrt(config.v_gene)
    group = base * np.sqrt(config.v_group) / sd_group * group
    noise = base * np.sqrt(config.v_noise) / sd_noise * noise
    outcomes = gene + group + noise

    treatments = genotypes[:, v].copy()
    covariates = np.delete(genotypes, v, axis=1)
    truth = GroundTruth(true_ate=tau_v, mu0=group.copy(), mu1=group + tau_v)
    logger.info("Simulated GWAS: %d samples, %d covariates, treatment SNP %d, tau=%.4f", J, V - 1, v, tau_v)

    dataset = DomainDataset(
        covariates=covariates,
        treatments=treatments,
        outcomes=outcomes,
        domain=Domain.TARGET,
        ground_truth=truth,
    )
    return GwasSimulation(
        dataset=dataset,
        coefficients=coefficients,
        treatment_column=v,
        gene_term=gene,
        group_term=group,
        noise=noise,
        clusters=clusters,
        kept_snps=kept,
    )


def mean_intensities(images: np.ndarray) -> np.ndarray:
    """Average pixel intensity per image on the [0, 1] scale."""
    n = images.shape[0]
    return images.reshape(n, -1).astype(np.float64).mean(axis=1) / 255.0


def digit_statistics(images: ImageSet, digits) -> Dict[int, Tuple[float, float]]:
    means = mean_intensities(images.images)
    stats = {}
    for digit in digits:
        values = means[images.labels == digit]
        if values.size == 0:
            raise DatasetError(f"no images of digit {digit}")
        stats[int(digit)] = (float(values.mean()), float(values.std()))
    return stats


def resolve_digit_stats(images: ImageSet, config: HcmnistConfig) -> HcmnistConfig:
    """Fill ``digit_stats`` for the target digits from ``images`` when not configured."""
    known = dict(config.digit_stats or {})
    todo = [d for d in config.target_digits if d not in known]
    if todo:
        known.update(digit_statistics(images, todo))
    return config.model_copy(update={"digit_stats": known})


def compute_phi(mean_intensity: np.ndarray, digit: int, config: HcmnistConfig) -> np.ndarray:
    """
    Map mean intensities of one digit onto [Min_c, Max_c].

    The standardized intensity is clipped to [-b, b] (b = clip_bound) and sent
    affinely onto the digit's range. With ``literal_phi`` the uncorrected map
    ``(z - Min_c) * (Max_c - Min_c) / 2b`` is used instead, which leaves the range.
    """
    if digit not in config.target_digits:
        raise DatasetError(f"digit {digit} is not one of the target digits {config.target_digits}")
    if not config.digit_stats or digit not in config.digit_stats:
        raise DatasetError(f"no intensity statistics for digit {digit}")
    mu, sd = config.digit_stats[digit]
    bound = config.clip_bound
    z = clip(standardize(mean_intensity, mu, sd), -bound, bound)
    low, high = config.range_for(digit)
    if config.literal_phi:
        return (z - low) * (high - low) / (2 * bound)
    return (z + bound) * (high - low) / (2 * bound) + low


def hcmnist_propensity(phi: np.ndarray) -> np.ndarray:
    return sigmoid(2.0 * phi + 0.5)


def hcmnist_outcome(phi: np.ndarray, t) -> np.ndarray:
    """Noise-free outcome at treatment ``t``."""
    s = 2.0 * np.asarray(t, dtype=np.float64) - 1.0
    return s * phi + s - 2.0 * np.sin(2.0 * s * phi) + 2.0 * (1.0 + 0.5 * phi)


def hcmnist_labels(
    phi: np.ndarray, rng: RngStream, noise_sd: float = 1.0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw (t, y) for each phi; also returns the noise-free potentials (mu0, mu1)."""
    phi = np.asarray(phi, dtype=np.float64)
    generator = rng.generator
    t = (generator.random(phi.shape[0]) < hcmnist_propensity(phi)).astype(np.float64)
    mu0 = hcmnist_outcome(phi, 0.0)
    mu1 = hcmnist_outcome(phi, 1.0)
    y = np.where(t == 1.0, mu1, mu0) + generator.normal(0.0, noise_sd, size=phi.shape[0])
    return t, y, mu0, mu1


def generate_hcmnist(
    images: ImageSet, config: HcmnistConfig, rng: RngStream
) -> Tuple[DomainDataset, DomainDataset]:
    """Labeled target domain from the two target digits, unlabeled source from the source digits."""
    c_i, c_j = config.target_digits
    source_digits = config.resolved_source_digits()
    if not source_digits:
        raise DatasetError("HCMNIST needs at least one source digit")
    labels = images.labels
    missing = [d for d in (c_i, c_j, *source_digits) if not np.any(labels == d)]
    if missing:
        raise DatasetError(f"images contain no examples of digits {missing}")

    config = resolve_digit_stats(images, config)
    means = mean_intensities(images.images)
    target_rows = np.flatnonzero(np.isin(labels, [c_i, c_j]))
    phi = np.empty(target_rows.size)
    for digit in (c_i, c_j):
        rows = labels[target_rows] == digit
        phi[rows] = compute_phi(means[target_rows][rows], digit, config)

    t, y, mu0, mu1 = hcmnist_labels(phi, rng.child(0), config.noise_sd)
    source_rows = np.flatnonzero(np.isin(labels, source_digits))

    def flatten(rows: np.ndarray) -> np.ndarray:
        return images.images[rows].reshape(rows.size, -1).astype(np.float64) / 255.0

    target = DomainDataset(
        covariates=flatten(target_rows),
        treatments=t,
        outcomes=y,
        domain=Domain.TARGET,
        ground_truth=GroundTruth.from_potentials(mu0, mu1),
        row_index=target_rows,
    )
    source = DomainDataset(covariates=flatten(source_rows), domain=Domain.SOURCE, row_index=source_rows)
    logger.info(
        "Generated HCMNIST: digits %s -> %d target rows, digits %s -> %d source rows",
        (c_i, c_j), target.n_rows, source_digits, source.n_rows,
    )
    return target, source
