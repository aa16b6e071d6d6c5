import numpy as np
import pytest

from batle.config import GwasConfig, HcmnistConfig
from batle.errors import DatasetError
from batle.services.generators import (
    compute_phi,
    generate_hcmnist,
    hcmnist_labels,
    hcmnist_outcome,
    hcmnist_propensity,
    prune_linkage,
    simulate_gwas,
)
from batle.services.idx import ImageSet
from batle.services.numeric import RngStream
from tests.conftest import fake_digits


@pytest.fixture(scope="module")
def small_gwas():
    return simulate_gwas(GwasConfig(n_samples=300, n_snps=200), RngStream(0))


def test_gwas_has_one_causal_snp(small_gwas):
    assert np.count_nonzero(small_gwas.coefficients) == 1
    assert small_gwas.coefficients[small_gwas.treatment_column] == small_gwas.dataset.ground_truth.true_ate


def test_gwas_covariates_are_binary(small_gwas):
    data = small_gwas.dataset
    assert set(np.unique(data.covariates)) <= {0.0, 1.0}
    assert set(np.unique(data.treatments)) == {0.0, 1.0}
    assert data.n_features == small_gwas.kept_snps.size - 1


def test_gwas_outcome_is_additive(small_gwas):
    data = small_gwas.dataset
    np.testing.assert_allclose(data.outcomes, small_gwas.gene_term + small_gwas.group_term + small_gwas.noise)
    truth = data.ground_truth
    np.testing.assert_allclose(truth.mu1 - truth.mu0, truth.true_ate)


@pytest.mark.parametrize("seed", range(5))
def test_gwas_variance_shares(seed):
    config = GwasConfig(n_samples=500, n_snps=1000, seed=seed)
    sim = simulate_gwas(config, RngStream(seed))
    variances = np.array([sim.gene_term.var(), sim.group_term.var(), sim.noise.var()])
    shares = variances / variances.sum()
    np.testing.assert_allclose(shares, [config.v_gene, config.v_group, config.v_noise], atol=1e-9)


def test_gwas_is_deterministic():
    config = GwasConfig(n_samples=100, n_snps=50, panel_rows=40)
    a = simulate_gwas(config, RngStream(4))
    b = simulate_gwas(config, RngStream(4))
    np.testing.assert_array_equal(a.dataset.outcomes, b.dataset.outcomes)
    np.testing.assert_array_equal(a.dataset.covariates, b.dataset.covariates)


def test_prune_linkage_drops_duplicates():
    g = np.random.default_rng(0)
    base = g.normal(size=(50, 3))
    panel = np.column_stack([base[:, 0], base[:, 0], base[:, 1], -base[:, 1], base[:, 2]])
    np.testing.assert_array_equal(prune_linkage(panel, 0.95, 10), [0, 2, 4])


def test_outcome_law_at_zero():
    assert hcmnist_outcome(np.array([0.0]), 1)[0] == pytest.approx(3.0)
    assert hcmnist_outcome(np.array([0.0]), 0)[0] == pytest.approx(1.0)
    assert hcmnist_propensity(np.array([0.0]))[0] == pytest.approx(1 / (1 + np.exp(-0.5)))


def stats_config(**kwargs):
    return HcmnistConfig(digit_stats={2: (0.5, 0.1), 7: (0.5, 0.1)}, **kwargs)


def test_phi_maps_means_to_range_centers():
    config = stats_config()
    assert compute_phi(np.array([0.5]), 2, config)[0] == pytest.approx(-1.0)
    assert compute_phi(np.array([0.5]), 7, config)[0] == pytest.approx(1.0)


def test_phi_clips_at_the_range_ends():
    config = stats_config()
    np.testing.assert_allclose(compute_phi(np.array([0.3, 0.9]), 2, config), [-2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(compute_phi(np.array([0.0, 1.0]), 7, config), [0.0, 2.0], atol=1e-12)


def test_literal_phi_variant():
    config = stats_config(literal_phi=True)
    assert compute_phi(np.array([0.5]), 2, config)[0] == pytest.approx(2.0 * 2.0 / 2.8)


def test_phi_rejects_non_target_digit():
    with pytest.raises(DatasetError):
        compute_phi(np.array([0.5]), 3, stats_config())


def test_treatment_frequency_tracks_propensity():
    phi = np.random.default_rng(0).uniform(-2, 2, size=100_000)
    t, _, _, _ = hcmnist_labels(phi, RngStream(1))
    bins = np.digitize(phi, np.linspace(-2, 2, 11)[1:-1])
    for b in range(10):
        rows = bins == b
        assert abs(t[rows].mean() - hcmnist_propensity(phi[rows]).mean()) < 0.05


def test_outcome_noise_moments():
    phi = np.random.default_rng(0).uniform(-2, 2, size=100_000)
    t, y, mu0, mu1 = hcmnist_labels(phi, RngStream(2), noise_sd=1.0)
    residual = y - np.where(t == 1, mu1, mu0)
    assert residual.mean() == pytest.approx(0.0, abs=0.02)
    assert residual.std() == pytest.approx(1.0, abs=0.02)


def test_generate_hcmnist_domains():
    images, labels = fake_digits(n_per_digit=6)
    target, source = generate_hcmnist(ImageSet(images, labels), HcmnistConfig(), RngStream(0))
    assert target.n_rows == 12 and source.n_rows == 48
    assert target.n_features == source.n_features == 784
    assert set(labels[target.row_index]) == {2, 7}
    assert not set(labels[source.row_index]) & {2, 7}
    assert target.covariates.min() >= 0.0 and target.covariates.max() <= 1.0
    assert not source.is_labeled


def test_generate_hcmnist_missing_digit():
    images, labels = fake_digits(n_per_digit=2)
    keep = labels != 7
    with pytest.raises(DatasetError, match="no examples"):
        generate_hcmnist(ImageSet(images[keep], labels[keep]), HcmnistConfig(), RngStream(0))
