import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Set, Union

import numpy as np

from prunetape.config import architecture_from_dict, spec_to_dict
from prunetape.exceptions import (
    ConfigError,
    DeadLayerError,
    NonFiniteGradientError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from prunetape.extraction import ExtractedModel
from prunetape.functional import log_softmax, mse_loss, softmax, softmax_cross_entropy
from prunetape.latency import LatencyRegularizer, LatencyTable
from prunetape.network import CompressibleNetwork
from prunetape.optim import OptimizerState, learning_rate, step_projected
from prunetape.schemas import (
    CostModel,
    DatasetHandle,
    DeadLayerPolicy,
    DistillConfig,
    MaskStats,
    MetricsRow,
    NormKind,
    RegularizerSpec,
    SurrogateKind,
    TaskKind,
    TrainConfig,
    TrainPhase,
)
from prunetape.surrogates import dead_masks, exact_flops, network_flops_surrogate
from prunetape.tensor import Tensor, backward

if TYPE_CHECKING:
    from prunetape.recorder import HistoryRecorder

logger = logging.getLogger(__name__)


def anneal_lambda(step: int, config: TrainConfig, phase: TrainPhase = TrainPhase.ANNEAL) -> float:
    """Linear ramp from 0 to lam_max over anneal_steps, then flat. Zero outside the anneal phase."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if phase != TrainPhase.ANNEAL:
        return 0.0
    if config.anneal_steps == 0:
        return config.lam_max
    return config.lam_max * min(1.0, step / config.anneal_steps)


def distill_loss(
    pretrained_logits: np.ndarray,
    student_logits: Tensor,
    temperature: float,
    coefficient: float,
) -> Tensor:
    """
    coefficient * T^2 * KL(softmax(pretrained / T) || softmax(student / T)), averaged
    over the batch. The pretrained logits are constants.
    """
    if not temperature > 0:
        raise ConfigError(f"Distillation temperature must be > 0, got {temperature}")
    target = np.atleast_2d(np.asarray(pretrained_logits, dtype=np.float64))
    student = student_logits if student_logits.ndim == 2 else student_logits.reshape(1, -1)
    if target.shape != student.shape:
        raise ShapeMismatchError(f"Cannot distill logits {target.shape} into {student.shape}")

    p = softmax(target / temperature)
    p_log_p = float(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum())
    log_q = log_softmax(student / temperature)
    batch = target.shape[0]
    kl = (p_log_p - (log_q * p).sum()) / batch
    return kl * (coefficient * temperature**2)


class Regularizer:
    """The cost term R: FLOPs surrogate or latency-table lookup, per RegularizerSpec."""

    def __init__(
        self,
        network: CompressibleNetwork,
        spec: RegularizerSpec,
        table: Optional[LatencyTable] = None,
    ):
        self.network = network
        self.spec = spec
        self._latency: Optional[LatencyRegularizer] = None
        if spec.cost == CostModel.LATENCY:
            if table is None:
                raise ConfigError("The latency cost model needs a latency table (--table)")
            self._latency = LatencyRegularizer(network, table, spec.surrogate)

    def __call__(self) -> Tensor:
        if self._latency is not None:
            return self._latency()
        return network_flops_surrogate(self.network, self.spec.surrogate, self.spec.quant_variant)


def task_loss(outputs: Tensor, targets: np.ndarray, task: TaskKind) -> Tensor:
    if task == TaskKind.CLASSIFICATION:
        return softmax_cross_entropy(outputs, targets)
    return mse_loss(outputs, targets)


def score_outputs(outputs: np.ndarray, data: DatasetHandle) -> float:
    """Accuracy for classification, mean squared error for regression."""
    if data.task == TaskKind.CLASSIFICATION:
        return float(np.mean(np.argmax(outputs, axis=1) == data.targets))
    return float(np.mean((outputs.reshape(-1) - data.targets) ** 2))


def evaluate(network: CompressibleNetwork, data: DatasetHandle) -> float:
    return score_outputs(network.predict(data.features), data)


class Batcher:
    """Shuffled minibatch indices, reshuffled every epoch from one seeded generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("Cannot batch an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(n)
        self._cursor = 0

    def next(self) -> np.ndarray:
        if self._cursor + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return np.sort(idx)


@dataclass
class TrainResult:
    network: CompressibleNetwork
    history: List[MetricsRow] = field(default_factory=list)
    dead: List[str] = field(default_factory=list)
    state: Optional[OptimizerState] = None


def metrics_row(
    network: CompressibleNetwork,
    step: int,
    phase: TrainPhase,
    lam: float,
    lr: float,
    loss: float,
    surrogate: float,
) -> MetricsRow:
    return MetricsRow(
        step=step,
        phase=phase,
        lam=lam,
        lr=lr,
        task_loss=loss,
        surrogate=surrogate,
        exact_flops=exact_flops(network),
        mask_stats={p.name: MaskStats.of(p.data) for p in network.masks()},
        weight_norms=network.weight_norms(),
    )


def train(
    network: CompressibleNetwork,
    data: DatasetHandle,
    config: TrainConfig,
    table: Optional[LatencyTable] = None,
    pretrained: Optional[CompressibleNetwork] = None,
    recorder: Optional["HistoryRecorder"] = None,
    phase: TrainPhase = TrainPhase.ANNEAL,
) -> TrainResult:
    """
    Minimize task loss + lambda * R with projected updates.

    Runs `config.steps` steps of `phase` (lambda ramps in during ANNEAL, is 0
    during PRETRAIN) then `config.finetune_steps` steps at lambda = 0 with the
    masks frozen. A row of metrics is recorded every `log_every` steps and on
    the last step of each phase. On a non-finite loss or gradient the network is
    restored to the last good snapshot before TrainingDivergedError is raised.
    """
    batch_norm = any(norm is not None and norm.kind == NormKind.BATCH for norm in network.norms)
    if batch_norm and min(config.batch_size, data.n_samples) < 2:
        raise ConfigError(
            f"Batch normalization needs batches of at least 2 samples, got batch_size={config.batch_size} "
            f"on {data.n_samples} sample(s)"
        )
    regularizer = Regularizer(network, config.regularizer, table)
    distill: DistillConfig = config.distill
    if distill.enabled and pretrained is None:
        raise ConfigError("Distillation is enabled but no pretrained network was given")

    batcher = Batcher(data.n_samples, config.batch_size, config.seed)
    state = OptimizerState(kind=config.optimizer)
    result = TrainResult(network=network, state=state)
    mask_names = [p.name for p in network.masks()]
    known_dead: Set[str] = set(dead_masks(network))
    params = network.parameters()

    schedule = [(phase, config.steps)]
    if config.finetune_steps:
        schedule.append((TrainPhase.FINETUNE, config.finetune_steps))

    snapshot: Dict[str, np.ndarray] = network.state_dict()
    snapshot_step = 0
    step = 0
    for current, n_steps in schedule:
        logger.info(f"Phase {current.value}: {n_steps} step(s), lambda_max={config.lam_max}")
        frozen_masks = config.freeze_masks or current != TrainPhase.ANNEAL
        distill_on = distill.enabled and (current == TrainPhase.FINETUNE or distill.during_anneal)
        phase_start = step

        for _ in range(n_steps):
            lam = anneal_lambda(step - phase_start, config, current)
            lr = learning_rate(step, config)
            idx = batcher.next()
            xb, yb = data.features[idx], data.targets[idx]

            network.zero_grad()
            outputs = network(xb)
            loss = task_loss(outputs, yb, data.task)
            task_value = loss.item()
            if distill_on:
                loss = loss + distill_loss(pretrained.predict(xb), outputs, distill.temperature, distill.coefficient)

            reg: Optional[Tensor] = None
            if lam > 0:
                reg = regularizer()
                loss = loss + lam * reg

            if not math.isfinite(loss.item()):
                network.load_state_dict(snapshot)
                raise TrainingDivergedError(
                    f"Loss became {loss.item()} at step {step}; restored the snapshot of step {snapshot_step}",
                    step=step,
                    last_good_state=snapshot,
                    history=result.history,
                )

            last_of_phase = step == phase_start + n_steps - 1
            if step % config.log_every == 0 or last_of_phase:
                surrogate = (reg if reg is not None else regularizer()).item()
                row = metrics_row(network, step, current, lam, lr, task_value, surrogate)
                result.history.append(row)
                if recorder is not None:
                    recorder.append(row)
                logger.debug(
                    f"step {step} [{current.value}] loss={task_value:.6g} R={surrogate:.6g} "
                    f"lambda={lam:.3g} flops={row.exact_flops}"
                )
                snapshot, snapshot_step = network.state_dict(), step

            backward(loss)
            frozen = list(mask_names) if frozen_masks else sorted(known_dead)
            try:
                step_projected(params, state, lr, config.weight_decay, frozen=frozen)
            except NonFiniteGradientError as e:
                network.load_state_dict(snapshot)
                raise TrainingDivergedError(
                    f"{e} (step {step}); restored the snapshot of step {snapshot_step}",
                    step=step,
                    last_good_state=snapshot,
                    history=result.history,
                ) from e

            newly_dead = sorted(set(dead_masks(network)) - known_dead)
            if newly_dead:
                if config.dead_layer_policy == DeadLayerPolicy.ABORT:
                    raise DeadLayerError(f"Mask(s) {', '.join(newly_dead)} died at step {step}")
                logger.warning(f"Mask(s) {', '.join(newly_dead)} died at step {step}; freezing their cost at 0")
                known_dead.update(newly_dead)
            step += 1

    result.dead = sorted(known_dead)
    return result


def pretrain(
    network: CompressibleNetwork,
    data: DatasetHandle,
    config: TrainConfig,
    steps: int,
    recorder: Optional["HistoryRecorder"] = None,
) -> TrainResult:
    """Plain training (lambda = 0, masks frozen, no distillation) to produce a warm start."""
    plain = replace(
        config,
        steps=max(steps, 1),
        finetune_steps=0,
        anneal_steps=0,
        regularizer=replace(config.regularizer, lam=0.0, cost=CostModel.FLOPS, surrogate=SurrogateKind.L1L2),
        distill=replace(config.distill, enabled=False),
    )
    return train(network, data, plain, recorder=recorder, phase=TrainPhase.PRETRAIN)


def save_checkpoint(
    network: CompressibleNetwork,
    path: Union[str, Path],
    extracted: Optional[ExtractedModel] = None,
) -> Path:
    """Architecture, every raw parameter array (masks included), ranges and the extracted model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "architecture": spec_to_dict(network.architecture),
        "parameters": {name: value.tolist() for name, value in sorted(network.state_dict().items())},
        "ranges": {
            layer.name: {str(b): list(r) for b, r in layer.ranges.items()}
            for layer in network.layers
            if layer.ranges
        },
        "checksum": network.checksum(),
        "extracted": None if extracted is None else extracted.to_dict(),
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> CompressibleNetwork:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        architecture = architecture_from_dict(payload["architecture"])
        parameters = payload["parameters"]
    except (json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"{path} is not a checkpoint: {e}") from None
    network = CompressibleNetwork(architecture)
    network.load_state_dict({name: np.asarray(value) for name, value in parameters.items()})
    for layer in network.layers:
        for bits, (lo, hi) in payload.get("ranges", {}).get(layer.name, {}).items():
            layer.set_range(int(bits), lo, hi)
    return network
