"""
Desk-scale study recipes.

Every run warm-starts from one pretrained dense network per (widths, data),
trains, extracts, and writes `<out_dir>/<run>/history.csv`, `extracted.json`
and `checkpoint.json`. Study-level CSVs and `summary.json` go to `out_dir`.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from prunetape.config import spec_to_dict
from prunetape.constants import CHECKPOINT_NAME, EXTRACTED_NAME, HISTORY_CSV_NAME, TABLE_CSV_NAME
from prunetape.datasets import gen_sparse_regression, load_dataset
from prunetape.exceptions import ConfigError, DegenerateModelError, TrainingDivergedError
from prunetape.extraction import ExtractedModel, extract_compressed, save_extracted
from prunetape.latency import LatencyTable, build_table, load_table, save_table
from prunetape.network import CompressibleNetwork
from prunetape.recorder import HistoryRecorder, history_to_csv
from prunetape.schemas import (
    ArchitectureSpec,
    CostModel,
    DatasetHandle,
    ExperimentId,
    ExperimentSpec,
    LayerKind,
    MetricsRow,
    NormKind,
    QuantSurrogateVariant,
    SurrogateKind,
    TaskKind,
    TrainConfig,
)
from prunetape.surrogates import exact_flops
from prunetape.trainer import pretrain, save_checkpoint, score_outputs, train

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.json"


@dataclass
class RunRecord:
    name: str
    lam: float
    seed: int
    network: CompressibleNetwork
    history: List[MetricsRow]
    initial_checksum: str
    score: float
    exact_macs: int
    extracted: Optional[ExtractedModel] = None

    @property
    def parameter_bits(self) -> int:
        return 0 if self.extracted is None else self.extracted.parameter_bits

    @property
    def widths(self) -> Tuple[int, ...]:
        return () if self.extracted is None else self.extracted.widths


@dataclass
class ExperimentResult:
    experiment: Optional[ExperimentId]
    out_dir: Path
    files: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def fit_architecture(architecture: ArchitectureSpec, data: DatasetHandle) -> ArchitectureSpec:
    """Match the input width to the features and the output width to the task."""
    n_out = data.n_classes if data.task == TaskKind.CLASSIFICATION else 1
    widths = (data.n_features,) + tuple(architecture.widths[1:-1]) + (n_out,)
    return replace(architecture, widths=widths)


def best_subset_oracle(features: np.ndarray, targets: np.ndarray, k: int, prescreen: int = 10) -> Tuple[int, ...]:
    """
    Exhaustive best k-subset least squares over the `prescreen` features most
    correlated with the targets.
    """
    if k == 0:
        return ()
    centered = features - features.mean(axis=0)
    y = targets - targets.mean()
    norms = np.linalg.norm(centered, axis=0) * max(np.linalg.norm(y), 1e-300)
    corr = np.abs(centered.T @ y) / np.where(norms > 0, norms, 1.0)
    candidates = np.sort(np.argsort(-corr, kind="stable")[: max(prescreen, k)])

    best: Tuple[int, ...] = ()
    best_rss = math.inf
    for subset in itertools.combinations(candidates.tolist(), k):
        design = features[:, subset]
        coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
        residual = targets - design @ coef
        rss = float(residual @ residual)
        if rss < best_rss:
            best, best_rss = tuple(subset), rss
    return best


def _support_text(indices: Sequence[int]) -> str:
    return " ".join(str(int(i)) for i in indices)


def _write_rows(rows: List[Dict[str, Any]], path: Path, files: List[Path]) -> None:
    files.append(history_to_csv(rows, path))
    logger.info(f"Wrote {len(rows)} row(s) to {path}")


class ExperimentRunner:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.out_dir = Path(spec.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.result = ExperimentResult(experiment=spec.experiment, out_dir=self.out_dir)
        self._pretrained: Dict[Tuple, CompressibleNetwork] = {}
        self._data: Optional[Tuple[DatasetHandle, DatasetHandle]] = None

    # --- shared plumbing ---

    def data(self) -> Tuple[DatasetHandle, DatasetHandle]:
        if self._data is None:
            full = load_dataset(self.spec.dataset)
            train_set, test_set = full.split(self.spec.dataset.test_fraction, self.spec.dataset.seed)
            if test_set.n_samples < 2:
                test_set = train_set
            logger.info(f"Data: {full.source} ({train_set.n_samples} train / {test_set.n_samples} test)")
            self._data = (train_set, test_set)
        return self._data

    def pretrained(self, architecture: ArchitectureSpec, data: DatasetHandle) -> CompressibleNetwork:
        key = (architecture.widths, architecture.norm, architecture.bias, data.source)
        if key not in self._pretrained:
            dense = replace(architecture, kinds=(LayerKind.DENSE,) * architecture.depth)
            network = CompressibleNetwork(dense, seed=self.spec.train.seed)
            if self.spec.pretrain_steps:
                name = f"pretrain-{len(self._pretrained)}"
                with HistoryRecorder(self.out_dir, name, network.checksum(), {"data": data.source}) as recorder:
                    pretrain(network, data, self.spec.train, self.spec.pretrain_steps, recorder=recorder)
            self._pretrained[key] = network
        return self._pretrained[key]

    def run(
        self,
        name: str,
        architecture: ArchitectureSpec,
        config: TrainConfig,
        data: DatasetHandle,
        test: DatasetHandle,
        table: Optional[LatencyTable] = None,
    ) -> RunRecord:
        pre = self.pretrained(architecture, data)
        network = CompressibleNetwork.warm_start(pre, architecture, seed=config.seed)
        checksum = network.checksum()
        run_dir = self.out_dir / name
        metadata = {
            "data": data.source,
            "lambda": config.lam_max,
            "seed": config.seed,
            "surrogate": config.regularizer.surrogate.value,
            "cost": config.regularizer.cost.value,
        }
        with HistoryRecorder(self.out_dir, name, checksum, metadata) as recorder:
            try:
                result = train(network, data, config, table=table, pretrained=pre, recorder=recorder)
            except TrainingDivergedError as e:
                history_to_csv([row.as_flat_dict() for row in e.history], run_dir / HISTORY_CSV_NAME)
                raise

            history_path = history_to_csv([row.as_flat_dict() for row in result.history], run_dir / HISTORY_CSV_NAME)
            self.result.files.append(history_path)
            extracted: Optional[ExtractedModel] = None
            try:
                extracted = extract_compressed(network, metadata={"run": name, "data": data.source})
            except DegenerateModelError as e:
                logger.warning(f"Run {name}: {e}")
            if extracted is not None:
                outputs = extracted.forward(test.features)
                self.result.files.append(save_extracted(extracted, run_dir / EXTRACTED_NAME))
            else:
                outputs = network.predict(test.features)
            score = score_outputs(outputs, test)
            self.result.files.append(save_checkpoint(network, run_dir / CHECKPOINT_NAME, extracted))

            record = RunRecord(
                name=name,
                lam=config.lam_max,
                seed=config.seed,
                network=network,
                history=result.history,
                initial_checksum=checksum,
                score=score,
                exact_macs=exact_flops(network),
                extracted=extracted,
            )
            recorder.set_metadata(
                {
                    "score": score,
                    "exact_macs": record.exact_macs,
                    "parameter_bits": record.parameter_bits,
                    "degenerate": extracted is None,
                }
            )
        logger.info(f"Run {name}: lambda={record.lam:g} score={score:.4f} MACs={record.exact_macs}")
        return record

    def write_summary(self, summary: Dict[str, Any]) -> None:
        summary = {"experiment": None if self.spec.experiment is None else self.spec.experiment.value, **summary}
        path = self.out_dir / SUMMARY_NAME
        path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        self.result.files.append(path)
        self.result.summary = summary

    def sweep_lambdas(self) -> Tuple[float, ...]:
        return self.spec.lambdas or (self.spec.train.lam_max,)

    # --- recipes ---

    def single(self) -> ExperimentResult:
        train_set, test_set = self.data()
        architecture = fit_architecture(self.spec.architecture, train_set)
        record = self.run("train", architecture, self.spec.train, train_set, test_set, self.table_if_needed())
        self.write_summary(
            {
                "score": record.score,
                "exact_macs": record.exact_macs,
                "parameter_bits": record.parameter_bits,
                "widths": list(record.widths),
                "initial_checksum": record.initial_checksum,
                "config": spec_to_dict(self.spec),
            }
        )
        return self.result

    def ablation(self) -> ExperimentResult:
        """Same seed and initial weights, l1 vs l1/l2 surrogate, input mask at all ones."""
        train_set, test_set = self.data()
        base = fit_architecture(self.spec.architecture, train_set)
        architecture = replace(
            base,
            kinds=(LayerKind.PRUNED,) + (LayerKind.DENSE,) * (base.depth - 1),
            norm=NormKind.BATCH,
        )
        records: Dict[SurrogateKind, RunRecord] = {}
        for surrogate in (SurrogateKind.L1, SurrogateKind.L1L2):
            config = replace(
                self.spec.train,
                regularizer=replace(self.spec.train.regularizer, surrogate=surrogate, cost=CostModel.FLOPS),
            )
            records[surrogate] = self.run(f"ablation-{surrogate.value}", architecture, config, train_set, test_set)

        l1, l1l2 = records[SurrogateKind.L1].history, records[SurrogateKind.L1L2].history
        if len(l1) != len(l1l2):
            raise RuntimeError(f"Ablation runs recorded {len(l1)} and {len(l1l2)} rows")
        mask, layer = "layer0.input_mask", "layer0"
        mean_rows, var_rows, pair_rows, norm_rows = [], [], [], []
        for a, b in zip(l1, l1l2):
            mean_rows.append({"step": a.step, "l1": a.mask_stats[mask].mean, "l1l2": b.mask_stats[mask].mean})
            var_rows.append({"step": a.step, "l1": a.mask_stats[mask].variance, "l1l2": b.mask_stats[mask].variance})
            pair_rows.append(
                {
                    "step": a.step,
                    "l1_surrogate": a.surrogate,
                    "l1_exact_flops": a.exact_flops,
                    "l1l2_surrogate": b.surrogate,
                    "l1l2_exact_flops": b.exact_flops,
                }
            )
            norm_rows.append({"step": a.step, "l1": a.weight_norms[layer], "l1l2": b.weight_norms[layer]})
        files = self.result.files
        _write_rows(mean_rows, self.out_dir / "mask_mean.csv", files)
        _write_rows(var_rows, self.out_dir / "mask_variance.csv", files)
        _write_rows(pair_rows, self.out_dir / "surrogate_vs_flops.csv", files)
        _write_rows(norm_rows, self.out_dir / "weight_norm.csv", files)

        summary: Dict[str, Any] = {"data": train_set.source}
        for surrogate, record in records.items():
            final_mask = record.network.layers[0].input_mask.data
            summary[surrogate.value] = {
                "rank_correlation": _rank_correlation(record.history),
                "initial_checksum": record.initial_checksum,
                "zero_fraction": float(np.mean(final_mask == 0.0)),
                "near_zero_fraction": float(np.mean((final_mask > 0.0) & (final_mask < 1e-6))),
                "score": record.score,
            }
        summary["same_initial_weights"] = (
            records[SurrogateKind.L1].initial_checksum == records[SurrogateKind.L1L2].initial_checksum
        )
        self.write_summary(summary)
        return self.result

    def quant_bitwidth(self) -> ExperimentResult:
        """Lambda sweep over bit ladders against fixed-width baselines."""
        train_set, test_set = self.data()
        base = fit_architecture(self.spec.architecture, train_set)
        kinds = tuple(k if k.is_quantized else LayerKind.QUANTIZED for k in base.kinds)
        architecture = replace(base, kinds=kinds)
        config = replace(
            self.spec.train,
            regularizer=replace(
                self.spec.train.regularizer,
                surrogate=SurrogateKind.L1L2,
                cost=CostModel.FLOPS,
                quant_variant=QuantSurrogateVariant.NUMERATOR,
            ),
        )

        sweep_rows = []
        for i, lam in enumerate(self.sweep_lambdas()):
            cfg = config.with_lambda(lam).with_seed(config.seed + i)
            record = self.run(f"quant-lambda-{i:03d}", architecture, cfg, train_set, test_set)
            row: Dict[str, Any] = {"lambda": lam}
            for layer in record.network.layers:
                row[f"{layer.name}.bits"] = layer.selected_bits()
            row.update(parameter_bits=record.parameter_bits, exact_macs=record.exact_macs, score=record.score)
            sweep_rows.append(row)

        baseline_steps = self.spec.train.finetune_steps or self.spec.train.steps
        baseline_cfg = replace(config.with_lambda(0.0), steps=baseline_steps, finetune_steps=0)
        baseline_rows = []
        for bits in self.spec.fixed_bits:
            fixed = replace(architecture, bit_ladder=(bits,), full_bit_ladder=False)
            record = self.run(f"quant-fixed-{bits:02d}", fixed, baseline_cfg, train_set, test_set)
            baseline_rows.append(
                {"bits": bits, "parameter_bits": record.parameter_bits, "exact_macs": record.exact_macs, "score": record.score}
            )

        _write_rows(sweep_rows, self.out_dir / "quant_sweep.csv", self.result.files)
        _write_rows(baseline_rows, self.out_dir / "fixed_bit_baselines.csv", self.result.files)
        self.write_summary(
            {
                "data": train_set.source,
                "distinct_bit_budgets": len({r["parameter_bits"] for r in sweep_rows}),
                "sweep": sweep_rows,
                "baselines": baseline_rows,
            }
        )
        return self.result

    def table_if_needed(self) -> Optional[LatencyTable]:
        if self.spec.train.regularizer.cost != CostModel.LATENCY:
            return None
        return self.latency_table()

    def latency_table(self, min_dim: int = 0) -> LatencyTable:
        if self.spec.table_path:
            return load_table(self.spec.table_path)
        profile = self.spec.profile
        cap = max(min_dim, profile.max_in, profile.max_out)
        profile = replace(profile, max_in=cap, max_out=cap)
        table = build_table(profile)
        self.result.files.append(save_table(table, self.out_dir / TABLE_CSV_NAME))
        return table

    def latency_vs_flops(self) -> ExperimentResult:
        """
        Two lambda sweeps, FLOPs cost and latency cost, both scored on the table.
        Latency coefficients are rescaled by dense MACs / dense latency so one
        lambda list spans comparable trade-offs.
        """
        train_set, test_set = self.data()
        architecture = fit_architecture(self.spec.architecture, train_set)
        table = self.latency_table(min_dim=max(architecture.widths))
        pairs = list(zip(architecture.widths[:-1], architecture.widths[1:]))
        for i, (a, b) in enumerate(pairs):
            table.require(a, b, f"layer{i}")
        dense_macs = sum(a * b for a, b in pairs)
        dense_latency = sum(float(table.entries[a, b]) for a, b in pairs)
        scale = dense_macs / dense_latency if dense_latency > 0 else 1.0

        rows = []
        for cost in (CostModel.FLOPS, CostModel.LATENCY):
            for i, lam in enumerate(self.sweep_lambdas()):
                effective = lam * scale if cost == CostModel.LATENCY else lam
                cfg = replace(
                    self.spec.train,
                    seed=self.spec.train.seed + i,
                    regularizer=replace(self.spec.train.regularizer, cost=cost, lam=effective),
                )
                record = self.run(f"latency-{cost.value}-{i:03d}", architecture, cfg, train_set, test_set, table)
                latency = None if record.extracted is None else table.model_latency(record.extracted)
                rows.append(
                    {
                        "cost": cost.value,
                        "lambda": lam,
                        "effective_lambda": effective,
                        "exact_macs": record.exact_macs,
                        "latency_ms": latency,
                        "score": record.score,
                    }
                )
        _write_rows(rows, self.out_dir / "latency_vs_flops.csv", self.result.files)
        self.write_summary({"data": train_set.source, "latency_lambda_scale": scale, "points": rows})
        return self.result

    def lambda_sweep(self) -> ExperimentResult:
        train_set, test_set = self.data()
        architecture = fit_architecture(self.spec.architecture, train_set)
        table = self.table_if_needed()
        rows = []
        for i, lam in enumerate(self.sweep_lambdas()):
            cfg = self.spec.train.with_lambda(lam).with_seed(self.spec.train.seed + i)
            record = self.run(f"lambda-sweep-{i:03d}", architecture, cfg, train_set, test_set, table)
            rows.append(
                {
                    "lambda": lam,
                    "exact_macs": record.exact_macs,
                    "parameter_bits": record.parameter_bits,
                    "score": record.score,
                    "widths": " ".join(str(w) for w in record.widths),
                }
            )
        _write_rows(rows, self.out_dir / "frontier.csv", self.result.files)
        self.write_summary({"data": train_set.source, "points": rows})
        return self.result

    def sparse_regression(self) -> ExperimentResult:
        """Support recovery of a masked linear model against the best-subset oracle."""
        ds = self.spec.dataset
        seeds = self.spec.seeds or (ds.seed,)
        rows = []
        for seed in seeds:
            data = gen_sparse_regression(ds.n, ds.d, ds.k, ds.noise, seed)
            architecture = ArchitectureSpec(
                widths=(ds.d, 1),
                kinds=(LayerKind.PRUNED,),
                norm=NormKind.NONE,
                bias=False,
                mask_init=self.spec.architecture.mask_init,
            )
            cfg = replace(
                self.spec.train,
                seed=seed,
                regularizer=replace(self.spec.train.regularizer, cost=CostModel.FLOPS),
            )
            record = self.run(f"sparse-regression-seed{seed}", architecture, cfg, data, data)
            planted = set(data.support or ())
            recovered = set(np.flatnonzero(record.network.layers[0].input_mask.data).tolist())
            oracle = best_subset_oracle(data.features, data.targets, ds.k)
            rows.append(
                {
                    "seed": seed,
                    "planted": _support_text(sorted(planted)),
                    "recovered": _support_text(sorted(recovered)),
                    "oracle": _support_text(oracle),
                    "true_positives": len(planted & recovered),
                    "false_positives": len(recovered - planted),
                    "exact_match": recovered == planted,
                    "oracle_match": set(oracle) == planted,
                    "mse": record.score,
                }
            )
        _write_rows(rows, self.out_dir / "support_recovery.csv", self.result.files)
        self.write_summary(
            {
                "exact_recoveries": sum(1 for r in rows if r["exact_match"]),
                "oracle_recoveries": sum(1 for r in rows if r["oracle_match"]),
                "seeds": list(seeds),
            }
        )
        return self.result


def _rank_correlation(history: Sequence[MetricsRow]) -> Optional[float]:
    """Spearman correlation of the recorded surrogate with exact FLOPs (None if undefined)."""
    if len(history) < 3:
        return None
    surrogate = [row.surrogate for row in history]
    flops = [row.exact_flops for row in history]
    if len(set(surrogate)) < 2 or len(set(flops)) < 2:
        return None
    rho, _ = spearmanr(surrogate, flops)
    return None if math.isnan(rho) else float(rho)


RECIPES = {
    ExperimentId.ABLATION: ExperimentRunner.ablation,
    ExperimentId.QUANT_BITWIDTH: ExperimentRunner.quant_bitwidth,
    ExperimentId.LATENCY_VS_FLOPS: ExperimentRunner.latency_vs_flops,
    ExperimentId.LAMBDA_SWEEP: ExperimentRunner.lambda_sweep,
    ExperimentId.SPARSE_REGRESSION: ExperimentRunner.sparse_regression,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    if spec.experiment is None:
        raise ConfigError("The config does not name an experiment (use the `train` subcommand for a single run)")
    logger.info(f"Experiment {spec.experiment.value} -> {spec.out_dir}")
    return RECIPES[spec.experiment](ExperimentRunner(spec))


def run_single(spec: ExperimentSpec) -> ExperimentResult:
    return ExperimentRunner(spec).single()
