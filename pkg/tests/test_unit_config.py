import json

from prunetape.config import (
    apply_overrides,
    architecture_from_dict,
    experiment_spec_from_dict,
    load_experiment_spec,
    spec_to_dict,
)
from prunetape.exceptions import ConfigError
from prunetape.schemas import (
    CostModel,
    DatasetKind,
    ExperimentId,
    ExperimentSpec,
    LayerKind,
    ProfileConfig,
    SurrogateKind,
    TrainConfig,
)
from tests.base import PruneTapeTestCase


class TestConfigFile(PruneTapeTestCase):
    def write(self, payload) -> str:
        path = self.tmp / "config.json"
        path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
        return str(path)

    def test_nested_values(self):
        spec = load_experiment_spec(
            self.write(
                {
                    "experiment": "lambda-sweep",
                    "dataset": {"kind": "synthetic-regression", "n": 100, "d": 10, "k": 3},
                    "architecture": {"widths": [10, 1], "kinds": ["pruned"], "norm": "none"},
                    "train": {"steps": 50, "regularizer": {"lam": 0.1, "surrogate": "l1"}},
                    "lambdas": [0, 0.5],
                }
            )
        )
        self.assertEqual(spec.experiment, ExperimentId.LAMBDA_SWEEP)
        self.assertEqual(spec.dataset.kind, DatasetKind.SYNTHETIC_REGRESSION)
        self.assertEqual(spec.architecture.kinds, (LayerKind.PRUNED,))
        self.assertEqual(spec.train.regularizer.surrogate, SurrogateKind.L1)
        self.assertEqual(spec.lambdas, (0.0, 0.5))
        self.assertEqual(spec.train.batch_size, TrainConfig().batch_size)

    def test_missing_file_names_the_path(self):
        path = str(self.tmp / "nope.json")
        with self.assertRaises(ConfigError) as ctx:
            load_experiment_spec(path)
        self.assertIn(path, str(ctx.exception))

    def test_invalid_json(self):
        with self.assertRaises(ConfigError) as ctx:
            load_experiment_spec(self.write("{\n  \"train\": \n"))
        self.assertIn("line", str(ctx.exception))

    def test_unknown_key_is_located(self):
        with self.assertRaises(ConfigError) as ctx:
            experiment_spec_from_dict({"train": {"stpes": 5}})
        self.assertIn("config.train", str(ctx.exception))
        self.assertIn("stpes", str(ctx.exception))

    def test_bad_enum_lists_choices(self):
        with self.assertRaises(ConfigError) as ctx:
            experiment_spec_from_dict({"train": {"regularizer": {"cost": "energy"}}})
        self.assertIn("flops", str(ctx.exception))

    def test_wrong_type(self):
        with self.assertRaises(ConfigError):
            experiment_spec_from_dict({"train": {"steps": "ten"}})
        with self.assertRaises(ConfigError):
            experiment_spec_from_dict({"train": {"freeze_masks": 1}})

    def test_validation_errors_are_config_errors(self):
        with self.assertRaises(ConfigError):
            experiment_spec_from_dict({"train": {"regularizer": {"lam": -1.0}}})
        with self.assertRaises(ConfigError):
            experiment_spec_from_dict({"architecture": {"widths": [4, 3, 2], "kinds": ["pruned"]}})

    def test_not_an_object(self):
        with self.assertRaises(ConfigError):
            experiment_spec_from_dict([1, 2])


class TestOverrides(PruneTapeTestCase):
    def test_flags_win(self):
        spec = apply_overrides(
            ExperimentSpec(),
            seed=9,
            lam=0.25,
            surrogate="l1",
            cost="latency",
            table="t.csv",
            out_dir="elsewhere",
        )
        self.assertEqual(spec.train.seed, 9)
        self.assertEqual(spec.train.lam_max, 0.25)
        self.assertEqual(spec.train.regularizer.surrogate, SurrogateKind.L1)
        self.assertEqual(spec.train.regularizer.cost, CostModel.LATENCY)
        self.assertEqual(spec.table_path, "t.csv")
        self.assertEqual(spec.out_dir, "elsewhere")

    def test_no_flags_no_change(self):
        self.assertEqual(apply_overrides(ExperimentSpec()), ExperimentSpec())

    def test_bad_override(self):
        with self.assertRaises(ConfigError):
            apply_overrides(ExperimentSpec(), lam=-0.5)
        with self.assertRaises(ConfigError):
            apply_overrides(ExperimentSpec(), surrogate="l0")


class TestValidation(PruneTapeTestCase):
    def test_profile_limits(self):
        with self.assertRaises(ConfigError):
            ProfileConfig(max_in=8, max_out=8, theta=8)
        with self.assertRaises(ConfigError):
            ProfileConfig(repetitions=2)

    def test_train_limits(self):
        for bad in ({"steps": 0}, {"lr": 0.0}, {"batch_size": 0}, {"log_every": 0}):
            with self.assertRaises(ConfigError):
                TrainConfig(**bad)

    def test_architecture_round_trip(self):
        arch = self.tiny_architecture(kinds=(LayerKind.QUANTIZED, LayerKind.LOW_RANK), bit_ladder=(2, 4))
        self.assertEqual(architecture_from_dict(json.loads(json.dumps(spec_to_dict(arch)))), arch)
