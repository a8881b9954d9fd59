import csv
import json

import numpy as np

from prunetape.datasets import gen_gaussian_clusters, gen_sparse_regression
from prunetape.exceptions import ConfigError
from prunetape.experiments import best_subset_oracle, fit_architecture, run_experiment, run_single
from prunetape.schemas import (
    ArchitectureSpec,
    DatasetKind,
    DatasetSpec,
    ExperimentId,
    ExperimentSpec,
    LayerKind,
    ProfileConfig,
    RegularizerSpec,
    TrainConfig,
)
from tests.base import PruneTapeTestCase


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class ExperimentTestCase(PruneTapeTestCase):
    def spec(self, experiment, **kwargs) -> ExperimentSpec:
        defaults = {
            "experiment": experiment,
            "dataset": DatasetSpec(n=80, d=6, k=2, separation=3.0),
            "architecture": ArchitectureSpec(widths=(6, 5, 2), kinds=(LayerKind.PRUNED, LayerKind.DENSE)),
            "train": TrainConfig(
                lr=1e-2, steps=10, anneal_steps=4, batch_size=16, log_every=3, regularizer=RegularizerSpec(lam=0.05)
            ),
            "pretrain_steps": 5,
            "out_dir": str(self.tmp / "out"),
            "profile": ProfileConfig(max_in=6, max_out=6, theta=2, repetitions=3, warmup=0, midpoint_iterations=1),
        }
        defaults.update(kwargs)
        return ExperimentSpec(**defaults)

    def summary(self):
        return json.loads((self.tmp / "out" / "summary.json").read_text())


class TestRecipes(ExperimentTestCase):
    def test_single_run(self):
        result = run_single(self.spec(None))
        self.assertIsNone(result.summary["experiment"])
        self.assertEqual(result.summary["widths"][0], 6)
        self.assertGreaterEqual(result.summary["score"], 0.0)
        self.assertLessEqual(result.summary["score"], 1.0)

    def test_run_experiment_needs_a_name(self):
        with self.assertRaises(ConfigError):
            run_experiment(self.spec(None))

    def test_ablation(self):
        result = run_experiment(self.spec(ExperimentId.ABLATION))
        summary = self.summary()
        self.assertTrue(summary["same_initial_weights"])
        self.assertEqual(summary["l1"]["initial_checksum"], summary["l1l2"]["initial_checksum"])
        means = read_csv(self.tmp / "out" / "mask_mean.csv")
        self.assertEqual([r["step"] for r in means], ["0", "3", "6", "9"])
        self.assertEqual(float(means[0]["l1"]), 1.0)
        self.assertEqual(float(means[0]["l1l2"]), 1.0)
        for name in ("mask_variance.csv", "surrogate_vs_flops.csv", "weight_norm.csv"):
            self.assertIn(self.tmp / "out" / name, result.files)
        self.assertTrue((self.tmp / "out" / "ablation-l1" / "history.csv").is_file())

    def test_quant_bitwidth(self):
        run_experiment(self.spec(ExperimentId.QUANT_BITWIDTH, lambdas=(0.0, 0.01), fixed_bits=(2, 8)))
        sweep = read_csv(self.tmp / "out" / "quant_sweep.csv")
        self.assertEqual(len(sweep), 2)
        self.assertIn("layer0.bits", sweep[0])
        self.assertIn(sweep[0]["layer0.bits"], {"0", "1", "2", "4", "8", "16"})
        baselines = read_csv(self.tmp / "out" / "fixed_bit_baselines.csv")
        self.assertEqual([r["bits"] for r in baselines], ["2", "8"])
        self.assertLess(int(baselines[0]["parameter_bits"]), int(baselines[1]["parameter_bits"]))

    def test_latency_vs_flops(self):
        run_experiment(self.spec(ExperimentId.LATENCY_VS_FLOPS, lambdas=(0.0, 0.01)))
        rows = read_csv(self.tmp / "out" / "latency_vs_flops.csv")
        self.assertEqual([r["cost"] for r in rows], ["flops", "flops", "latency", "latency"])
        for row in rows:
            self.assertGreaterEqual(float(row["latency_ms"]), 0.0)
        self.assertTrue((self.tmp / "out" / "latency_table.csv").is_file())
        self.assertGreater(self.summary()["latency_lambda_scale"], 0.0)

    def test_lambda_sweep(self):
        run_experiment(self.spec(ExperimentId.LAMBDA_SWEEP, lambdas=(0.0, 0.1)))
        rows = read_csv(self.tmp / "out" / "frontier.csv")
        self.assertEqual([float(r["lambda"]) for r in rows], [0.0, 0.1])
        self.assertEqual(len(self.summary()["points"]), 2)

    def test_sparse_regression(self):
        spec = self.spec(
            ExperimentId.SPARSE_REGRESSION,
            dataset=DatasetSpec(kind=DatasetKind.SYNTHETIC_REGRESSION, n=60, d=8, k=2, noise=0.01),
            seeds=(0, 1),
            train=TrainConfig(lr=5e-2, steps=40, anneal_steps=10, batch_size=60, log_every=10, regularizer=RegularizerSpec(lam=0.01)),
        )
        run_experiment(spec)
        rows = read_csv(self.tmp / "out" / "support_recovery.csv")
        self.assertEqual([r["seed"] for r in rows], ["0", "1"])
        for row in rows:
            self.assertEqual(row["oracle_match"], "True")
            self.assertEqual(row["planted"], " ".join(str(j) for j in gen_sparse_regression(60, 8, 2, 0.01, int(row["seed"])).support))
        self.assertEqual(self.summary()["oracle_recoveries"], 2)


class TestHelpers(PruneTapeTestCase):
    def test_fit_architecture(self):
        data = gen_gaussian_clusters(20, 9, 2, separation=1.0, seed=0)
        arch = fit_architecture(ArchitectureSpec(widths=(784, 32, 10), kinds=(LayerKind.PRUNED, LayerKind.DENSE)), data)
        self.assertEqual(arch.widths, (9, 32, 2))
        regression = gen_sparse_regression(20, 5, 2, noise=0.0, seed=0)
        self.assertEqual(fit_architecture(arch, regression).widths, (5, 32, 1))

    def test_oracle_recovers_planted_support(self):
        data = gen_sparse_regression(100, 12, 3, noise=0.01, seed=4)
        self.assertEqual(best_subset_oracle(data.features, data.targets, 3), data.support)

    def test_oracle_empty_support(self):
        self.assertEqual(best_subset_oracle(np.ones((4, 2)), np.zeros(4), 0), ())
