from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from prunetape.constants import DEFAULT_BIT_LADDER, DEFAULT_MIDPOINT_ITERATIONS
from prunetape.exceptions import ConfigError


class Projection(str, Enum):
    """How the optimizer projects a parameter after each step."""

    NONE = "none"
    NONNEGATIVE = "nonnegative"  # max(0, x)
    UNIT_INTERVAL = "unit_interval"  # clamp to [0, 1]


class LayerKind(str, Enum):
    """Re-parameterization of a dense layer's weight matrix."""

    DENSE = "dense"  # W, not searched
    PRUNED = "pruned"  # W diag(a)
    UNSTRUCTURED = "unstructured"  # W * A
    LOW_RANK = "low_rank"  # U diag(b) V
    PRUNE_LOW_RANK = "prune_low_rank"  # U diag(b) V diag(a)
    QUANTIZED = "quantized"  # nested bit ladder
    PRUNE_UNSTRUCTURED = "prune_unstructured"  # (W * A) diag(a)
    PRUNE_QUANTIZED = "prune_quantized"  # ladder(W) diag(a)

    @property
    def has_input_mask(self) -> bool:
        return self in (
            LayerKind.PRUNED,
            LayerKind.PRUNE_LOW_RANK,
            LayerKind.PRUNE_UNSTRUCTURED,
            LayerKind.PRUNE_QUANTIZED,
        )

    @property
    def has_matrix_mask(self) -> bool:
        return self in (LayerKind.UNSTRUCTURED, LayerKind.PRUNE_UNSTRUCTURED)

    @property
    def is_low_rank(self) -> bool:
        return self in (LayerKind.LOW_RANK, LayerKind.PRUNE_LOW_RANK)

    @property
    def is_quantized(self) -> bool:
        return self in (LayerKind.QUANTIZED, LayerKind.PRUNE_QUANTIZED)


class SurrogateKind(str, Enum):
    L1 = "l1"
    L1L2 = "l1l2"


class CostModel(str, Enum):
    FLOPS = "flops"
    LATENCY = "latency"


class QuantSurrogateVariant(str, Enum):
    VERBATIM = "verbatim"  # (sum v / ||v||) d_i d_{i+1}
    NUMERATOR = "numerator"  # (sum v) d_i d_{i+1}


class NormKind(str, Enum):
    NONE = "none"
    BATCH = "batch"
    LAYER = "layer"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class LrSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


class MaskInit(str, Enum):
    ONES = "ones"
    UNIFORM = "uniform"  # U[0, 0.5]


class DeadLayerPolicy(str, Enum):
    FREEZE = "freeze"
    ABORT = "abort"


class TrainPhase(str, Enum):
    PRETRAIN = "pretrain"
    ANNEAL = "anneal"
    FINETUNE = "finetune"


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class DatasetKind(str, Enum):
    IDX_IMAGES = "idx-images"
    SYNTHETIC_REGRESSION = "synthetic-regression"
    SYNTHETIC_CLUSTERS = "synthetic-clusters"


class ExperimentId(str, Enum):
    ABLATION = "ablation-l1-vs-l1l2"
    QUANT_BITWIDTH = "quant-bitwidth"
    LATENCY_VS_FLOPS = "latency-vs-flops"
    LAMBDA_SWEEP = "lambda-sweep"
    SPARSE_REGRESSION = "sparse-regression"


@dataclass(frozen=True)
class RegularizerSpec:
    """Which surrogate, which cost model, and the peak coefficient."""

    surrogate: SurrogateKind = SurrogateKind.L1L2
    cost: CostModel = CostModel.FLOPS
    lam: float = 0.0
    quant_variant: QuantSurrogateVariant = QuantSurrogateVariant.VERBATIM

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"Regularization coefficient must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class DistillConfig:
    enabled: bool = False
    coefficient: float = 0.5
    temperature: float = 2.0
    # Active while the regularizer anneals, not only during fine-tuning.
    during_anneal: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"Distillation temperature must be > 0, got {self.temperature}")
        if self.coefficient < 0:
            raise ConfigError(f"Distillation coefficient must be >= 0, got {self.coefficient}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerKind = OptimizerKind.ADAM
    lr: float = 1e-3
    lr_schedule: LrSchedule = LrSchedule.CONSTANT
    weight_decay: float = 0.0  # weights only, never masks
    steps: int = 1000
    anneal_steps: int = 500
    finetune_steps: int = 0
    batch_size: int = 64
    seed: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    dead_layer_policy: DeadLayerPolicy = DeadLayerPolicy.FREEZE
    freeze_masks: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.anneal_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("anneal_steps and finetune_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"Learning rate must be > 0, got {self.lr}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")

    @property
    def lam_max(self) -> float:
        return self.regularizer.lam

    @property
    def total_steps(self) -> int:
        return self.steps + self.finetune_steps

    def with_lambda(self, lam: float) -> "TrainConfig":
        return replace(self, regularizer=replace(self.regularizer, lam=lam))

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class ProfileConfig:
    """Latency-table sampling and timing parameters."""

    max_in: int = 64  # beta
    max_out: int = 64  # gamma
    theta: int = 8
    midpoint_iterations: int = DEFAULT_MIDPOINT_ITERATIONS
    repetitions: int = 5
    warmup: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.theta < 1:
            raise ConfigError(f"theta must be >= 1, got {self.theta}")
        if self.midpoint_iterations < 0:
            raise ConfigError("midpoint_iterations must be >= 0")
        if self.repetitions < 3:
            raise ConfigError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.theta >= self.max_in or self.theta >= self.max_out:
            raise ConfigError(
                f"theta ({self.theta}) must be smaller than both caps ({self.max_in}, {self.max_out})"
            )


@dataclass(frozen=True)
class ArchitectureSpec:
    """Feed-forward network: widths[0] inputs, widths[-1] outputs, one kind per layer."""

    widths: Tuple[int, ...] = (784, 256, 10)
    kinds: Tuple[LayerKind, ...] = (LayerKind.PRUNED, LayerKind.DENSE)
    norm: NormKind = NormKind.BATCH
    bias: bool = True
    bit_ladder: Tuple[int, ...] = DEFAULT_BIT_LADDER
    full_bit_ladder: bool = False  # lets the lowest rung's mask be optimized too
    mask_init: MaskInit = MaskInit.ONES

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("An architecture needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"Widths must be positive, got {self.widths}")
        if len(self.kinds) != len(self.widths) - 1:
            raise ConfigError(
                f"Expected {len(self.widths) - 1} layer kind(s) for widths {self.widths}, got {len(self.kinds)}"
            )
        if not self.bit_ladder or any(b < 1 for b in self.bit_ladder):
            raise ConfigError(f"Invalid bit ladder {self.bit_ladder}")
        if list(self.bit_ladder) != sorted(set(self.bit_ladder)):
            raise ConfigError(f"Bit ladder must be strictly increasing, got {self.bit_ladder}")

    @property
    def depth(self) -> int:
        return len(self.kinds)


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind = DatasetKind.SYNTHETIC_CLUSTERS
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    n: int = 2000
    d: int = 64
    k: int = 8  # planted support size / informative features
    noise: float = 0.01
    separation: float = 1.5
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind == DatasetKind.IDX_IMAGES and not (self.images_path and self.labels_path):
            raise ConfigError("idx-images datasets need both images_path and labels_path")
        if self.n < 1 or self.d < 1:
            raise ConfigError("Dataset sizes must be positive")
        if not 0 <= self.k <= self.d:
            raise ConfigError(f"k must satisfy 0 <= k <= d, got k={self.k}, d={self.d}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")


@dataclass(frozen=True)
class ExperimentSpec:
    """A run recipe. `experiment` is unset for a single `train` run."""

    experiment: Optional[ExperimentId] = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"
    pretrain_steps: int = 500
    lambdas: Tuple[float, ...] = ()
    seeds: Tuple[int, ...] = ()
    fixed_bits: Tuple[int, ...] = (2, 4, 8, 16)
    table_path: Optional[str] = None
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def __post_init__(self):
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError(f"All sweep coefficients must be >= 0, got {self.lambdas}")


@dataclass(frozen=True)
class MaskStats:
    """Statistics of |a| for one mask: mean, variance (population), nonzeros."""

    mean: float
    variance: float
    nnz: int
    size: int
    minimum: float

    @classmethod
    def of(cls, values: np.ndarray) -> "MaskStats":
        absolute = np.abs(values.reshape(-1))
        mean = float(absolute.mean())
        return cls(
            mean=mean,
            variance=float(np.mean((absolute - mean) ** 2)),
            nnz=int(np.count_nonzero(values)),
            size=int(values.size),
            minimum=float(values.min()),
        )


@dataclass(frozen=True)
class MetricsRow:
    step: int
    phase: TrainPhase
    lam: float
    lr: float
    task_loss: float
    surrogate: float
    exact_flops: int
    mask_stats: Dict[str, MaskStats]
    weight_norms: Dict[str, float]

    def __post_init__(self):
        for name, stats in self.mask_stats.items():
            if stats.variance < 0:
                raise ValueError(f"Negative variance recorded for mask {name}")

    def as_flat_dict(self) -> Dict[str, object]:
        """Column name -> value, in a stable order."""
        row: Dict[str, object] = {
            "step": self.step,
            "phase": self.phase.value,
            "lambda": self.lam,
            "lr": self.lr,
            "task_loss": self.task_loss,
            "surrogate": self.surrogate,
            "exact_flops": self.exact_flops,
        }
        for name, stats in self.mask_stats.items():
            row[f"{name}.mean"] = stats.mean
            row[f"{name}.var"] = stats.variance
            row[f"{name}.nnz"] = stats.nnz
            row[f"{name}.min"] = stats.minimum
        for name, norm in self.weight_norms.items():
            row[f"{name}.fro"] = norm
        return row


@dataclass(frozen=True)
class DatasetHandle:
    """Features/targets plus provenance. `support` is set for planted-support data."""

    kind: DatasetKind
    task: TaskKind
    features: np.ndarray
    targets: np.ndarray
    source: str
    normalized: bool = False
    support: Optional[Tuple[int, ...]] = None
    coefficients: Optional[np.ndarray] = None
    noise: float = 0.0

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"Features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"Feature/label count mismatch: {self.features.shape[0]} vs {self.targets.shape[0]}"
            )

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        if self.task != TaskKind.CLASSIFICATION:
            return 1
        return int(self.targets.max()) + 1

    def split(self, test_fraction: float, seed: int) -> Tuple["DatasetHandle", "DatasetHandle"]:
        """Deterministic shuffled train/test split."""
        order = np.random.default_rng(seed).permutation(self.n_samples)
        n_test = int(round(self.n_samples * test_fraction))
        test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
        return self.subset(train_idx), self.subset(test_idx)

    def subset(self, indices: np.ndarray) -> "DatasetHandle":
        return replace(self, features=self.features[indices], targets=self.targets[indices])
