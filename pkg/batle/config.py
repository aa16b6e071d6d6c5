"""
Configuration models for dataset generation, the network, training and sweeps.

Every model is a pydantic model so that JSON config files, CLI overrides and
HTTP payloads share one validation path.
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator

MAX_SEED = 2**64

MethodName = Literal["causal_batle", "bayesian_dragonnet", "dragonnet", "aipw"]
DatasetName = Literal["gwas", "ihdp", "hcmnist", "custom-csv"]

IHDP_REPLICATIONS = 10


class GwasConfig(BaseModel):
    """Semi-synthetic GWAS generator settings (allele frequencies from PCA of a reference panel)."""
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(2000, ge=10, description="J, number of simulated individuals")
    n_snps: int = Field(10000, ge=2, description="V, number of SNPs before LD pruning")
    n_components: int = Field(3, ge=1, description="L, principal components taken from the panel")
    gamma_scale: float = Field(0.9, gt=0)
    gamma_upper: float = Field(0.5, gt=0)
    gamma_intercept: float = Field(0.05, description="Fixed loading on the intercept row of S")
    tau_sd: float = Field(0.5, gt=0)
    n_clusters: int = Field(3, ge=1)
    inv_gamma_shape: float = Field(3.0, gt=0)
    inv_gamma_scale: float = Field(1.0, gt=0)
    v_gene: float = Field(0.4, gt=0, lt=1)
    v_group: float = Field(0.4, gt=0, lt=1)
    v_noise: float = Field(0.2, gt=0, lt=1)
    frequency_clip: float = Field(0.01, gt=0, lt=0.5)
    panel_rows: int = Field(200, ge=2)
    panel_low: float = Field(0.05, ge=0, lt=1)
    panel_high: float = Field(0.95, gt=0, le=1)
    ld_threshold: float = Field(0.95, gt=0, le=1)
    ld_window: int = Field(100, ge=1)
    seed: int = Field(0, ge=0, lt=MAX_SEED)
    reference_panel_path: Optional[Path] = None

    @model_validator(mode="after")
    def check_shares(self) -> "GwasConfig":
        total = self.v_gene + self.v_group + self.v_noise
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"v_gene + v_group + v_noise must equal 1, got {total}")
        if self.n_components > self.n_snps:
            raise ValueError("n_components must not exceed n_snps")
        if self.panel_low >= self.panel_high:
            raise ValueError("panel_low must be below panel_high")
        return self


class HcmnistConfig(BaseModel):
    """MNIST-based benchmark: two target digits carry (T, Y), the rest form the source domain."""
    model_config = ConfigDict(extra="forbid")

    target_digits: Tuple[int, int] = (2, 7)
    source_digits: Optional[List[int]] = None
    digit_ranges: Optional[Dict[int, Tuple[float, float]]] = None
    digit_stats: Optional[Dict[int, Tuple[float, float]]] = None
    clip_bound: float = Field(1.4, gt=0)
    noise_sd: float = Field(1.0, ge=0)
    literal_phi: bool = Field(False, description="Use the uncorrected affine map, which leaves the digit range")
    seed: int = Field(0, ge=0, lt=MAX_SEED)

    @model_validator(mode="after")
    def check_digits(self) -> "HcmnistConfig":
        c_i, c_j = self.target_digits
        for digit in (c_i, c_j, *(self.source_digits or [])):
            if not 0 <= digit <= 9:
                raise ValueError(f"digit {digit} outside 0..9")
        if c_i == c_j:
            raise ValueError("target digits must differ")
        if self.source_digits is not None and set(self.source_digits) & {c_i, c_j}:
            raise ValueError("source digits overlap the target digits")
        return self

    def range_for(self, digit: int) -> Tuple[float, float]:
        if self.digit_ranges and digit in self.digit_ranges:
            return self.digit_ranges[digit]
        c_i, _ = self.target_digits
        return (-2.0, 0.0) if digit == c_i else (0.0, 2.0)

    def resolved_source_digits(self) -> List[int]:
        if self.source_digits is not None:
            return list(self.source_digits)
        return [d for d in range(10) if d not in self.target_digits]


class BackboneConfig(BaseModel):
    """Architecture without the input width, which is only known once data is loaded."""
    model_config = ConfigDict(extra="forbid")

    shared_layer_widths: List[PositiveInt] = Field(default_factory=lambda: [200, 200, 200], min_length=1)
    head_layer_widths: List[PositiveInt] = Field(default_factory=lambda: [100, 100])
    dropout_rate: float = Field(0.1, ge=0, lt=1)
    discriminator_enabled: bool = True
    reconstruction_enabled: bool = True
    point_outcomes: bool = Field(False, description="Point outcome heads (Dragonnet) instead of Gaussian heads")
    sigma_floor: float = Field(1e-3, gt=0)
    activation: Literal["elu"] = "elu"

    def for_input(self, input_dim: int) -> "NetworkConfig":
        return NetworkConfig(input_dim=input_dim, **self.model_dump())


class NetworkConfig(BackboneConfig):
    input_dim: PositiveInt

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(**self.model_dump(exclude={"input_dim"}))


class LossWeights(BaseModel):
    """alpha_0..alpha_4 of the weighted total loss."""
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    outcome: float = Field(1.0, ge=0)
    propensity: float = Field(1.0, ge=0)
    discriminator: float = Field(1.0, ge=0)
    adversarial: float = Field(1.0, ge=0)
    reconstruction: float = Field(1.0, ge=0)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.outcome, self.propensity, self.discriminator, self.adversarial, self.reconstruction)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    weights: LossWeights = Field(default_factory=LossWeights)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(64, ge=2)
    disc_steps_per_batch: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=MAX_SEED)
    patience: Optional[int] = Field(None, ge=1, description="Early-stopping patience in epochs; None disables")
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    joint_objective: bool = Field(False, description="Minimize the weighted total over all parameters at once")
    adversarial_gradient: Literal["reversal", "direct"] = Field(
        "reversal",
        description="Encoder signal for the adversarial term: the reversed discriminator gradient, or the gradient of mean log(1 - D_hat)",
    )


class ExperimentConfig(BaseModel):
    """One sweep: ratios x dataset replications x methods x model repetitions."""
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetName
    setting: Optional[Literal[1, 2]] = None
    ratios: Optional[List[float]] = None
    target_fractions: Optional[List[float]] = None
    b_d: int = Field(1, ge=1)
    b_m: int = Field(1, ge=1)
    methods: List[MethodName] = Field(default_factory=lambda: ["causal_batle"], min_length=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    network: BackboneConfig = Field(default_factory=BackboneConfig)
    mc_passes: int = Field(30, ge=1)
    confidence: float = Field(0.95, gt=0, lt=1)
    master_seed: int = Field(0, ge=0, lt=MAX_SEED)
    gwas: GwasConfig = Field(default_factory=GwasConfig)
    hcmnist: HcmnistConfig = Field(default_factory=HcmnistConfig)
    mnist_dir: Path = Path("data/mnist")
    ihdp_dir: Path = Path("data/ihdp")
    target_csv: Optional[Path] = None
    source_csv: Optional[Path] = None
    aipw_folds: int = Field(2, ge=2)
    ridge_penalty: float = Field(1.0, gt=0)
    logistic_penalty: float = Field(1.0, gt=0)
    record_wall_time: bool = False

    @field_validator("ratios")
    @classmethod
    def positive_ratios(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None:
            if not value:
                raise ValueError("ratios must not be empty")
            bad = [r for r in value if not r > 0]
            if bad:
                raise ValueError(f"all ratios r must be > 0, got {bad}")
            if len(set(value)) != len(value):
                raise ValueError("ratios must be distinct")
        return value

    @field_validator("target_fractions")
    @classmethod
    def open_unit_fractions(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None:
            if not value:
                raise ValueError("target_fractions must not be empty")
            bad = [p for p in value if not 0 < p < 1]
            if bad:
                raise ValueError(f"target fractions p_t must lie in (0, 1), got {bad}")
        return value

    @model_validator(mode="after")
    def check_protocol(self) -> "ExperimentConfig":
        if (self.ratios is None) == (self.target_fractions is None):
            raise ValueError("give exactly one of ratios or target_fractions")
        natural = {"gwas": 1, "ihdp": 1, "hcmnist": 2}
        if self.setting is None:
            if self.dataset == "custom-csv":
                self.setting = 2 if self.source_csv is not None else 1
            else:
                self.setting = natural[self.dataset]
        if self.dataset in natural and natural[self.dataset] != self.setting:
            raise ValueError(
                f"dataset {self.dataset} requires setting {natural[self.dataset]}: "
                "setting 1 splits one labeled dataset, setting 2 needs separate target/source data"
            )
        if self.dataset == "custom-csv":
            if self.target_csv is None:
                raise ValueError("custom-csv requires target_csv")
            if self.setting == 1 and self.source_csv is not None:
                raise ValueError("setting 1 requires a single labeled dataset; drop source_csv")
            if self.setting == 2 and self.source_csv is None:
                raise ValueError("setting 2 requires paired target/source data; add source_csv")
        if self.dataset == "ihdp" and self.b_d > IHDP_REPLICATIONS:
            raise ValueError(f"ihdp provides {IHDP_REPLICATIONS} replications, b_d={self.b_d}")
        if self.target_fractions is not None and self.setting == 2:
            raise ValueError("target_fractions only apply to setting 1; use ratios")
        return self

    @property
    def repetitions(self) -> int:
        """B = b_d x b_m estimates per (method, ratio)."""
        return self.b_d * self.b_m

    def resolved_ratios(self) -> List[float]:
        if self.ratios is not None:
            return list(self.ratios)
        return [p / (1.0 - p) for p in self.target_fractions]
