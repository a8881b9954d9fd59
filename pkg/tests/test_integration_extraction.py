import json

import numpy as np

from prunetape.exceptions import ConfigError, DegenerateModelError, ShapeMismatchError
from prunetape.extraction import ExtractedModel, extract_compressed, load_extracted, save_extracted
from prunetape.schemas import LayerKind, NormKind
from prunetape.surrogates import exact_flops
from prunetape.trainer import load_checkpoint, save_checkpoint, train
from tests.base import PruneTapeTestCase


class TestExtraction(PruneTapeTestCase):
    def setUp(self):
        super().setUp()
        self.x = self.rng.standard_normal((16, 4))

    def test_pruned_hidden_unit_is_removed(self):
        for norm in (NormKind.NONE, NormKind.BATCH):
            network = self.tiny_network(widths=(4, 3, 2), kinds=(LayerKind.DENSE, LayerKind.PRUNED), norm=norm)
            network.layers[1].input_mask.data = np.array([1.0, 0.0, 1.0])
            model = extract_compressed(network)
            self.assertEqual(model.widths, (4, 2, 2))
            np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-9)
            self.assertEqual(model.exact_macs, exact_flops(network))

    def test_all_ones_is_a_no_op(self):
        network = self.tiny_network(widths=(4, 5, 3), kinds=(LayerKind.PRUNED, LayerKind.PRUNED))
        model = extract_compressed(network)
        self.assertEqual(model.widths, (4, 5, 3))
        self.assertEqual(model.exact_macs, 4 * 5 + 5 * 3)
        np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-9)

    def test_mask_values_are_folded_in(self):
        network = self.tiny_network(widths=(4, 3), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        network.layers[0].input_mask.data = np.array([0.5, 0.0, 2.0, 0.0])
        model = extract_compressed(network)
        np.testing.assert_array_equal(model.layers[0].input_indices, [0, 2])
        np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-12)

    def test_rank_truncation(self):
        network = self.tiny_network(widths=(4, 6, 3), kinds=(LayerKind.PRUNE_LOW_RANK, LayerKind.LOW_RANK))
        network.layers[0].rank_mask.data[[1, 3]] = 0.0
        network.layers[1].rank_mask.data[2] = 0.0
        model = extract_compressed(network)
        self.assertEqual([layer.rank for layer in model.layers], [2, 2])
        np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-9)
        self.assertEqual(model.exact_macs, exact_flops(network))

    def test_unstructured_counts_nonzeros(self):
        network = self.tiny_network(widths=(4, 3), kinds=(LayerKind.UNSTRUCTURED,), norm=NormKind.NONE)
        network.layers[0].matrix_mask.data[0, :] = 0.0
        model = extract_compressed(network)
        self.assertEqual(model.layers[0].nnz, 8)
        self.assertEqual(model.exact_macs, 8)
        np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-12)

    def test_quantized_bit_width(self):
        network = self.tiny_network(
            widths=(4, 5, 3),
            kinds=(LayerKind.QUANTIZED, LayerKind.PRUNE_QUANTIZED),
            bit_ladder=(1, 2, 4),
        )
        network.layers[0].bit_masks.data = np.array([0.9, 0.2])
        network.layers[1].input_mask.data[1] = 0.0
        network.project_bit_masks()
        model = extract_compressed(network)
        self.assertEqual(model.bit_widths, {"layer0": 2, "layer1": 4})
        self.assertEqual(model.layers[1].input_scale.size, 4)
        np.testing.assert_allclose(model(self.x), network.predict(self.x), atol=1e-9)

    def test_quantized_weights_stay_on_the_grid(self):
        network = self.tiny_network(widths=(4, 3), kinds=(LayerKind.QUANTIZED,), bit_ladder=(2,), norm=NormKind.NONE)
        model = extract_compressed(network)
        lo, hi = network.layers[0].ranges[2]
        levels = (model.layers[0].weight - lo) / ((hi - lo) / 3)
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-9)

    def test_degenerate_first_layer(self):
        network = self.tiny_network(widths=(4, 3), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        network.layers[0].input_mask.data[:] = 0.0
        with self.assertRaises(DegenerateModelError) as ctx:
            extract_compressed(network)
        self.assertIn("layer0", str(ctx.exception))

    def test_degenerate_hidden_layer(self):
        network = self.tiny_network(widths=(4, 3, 2), kinds=(LayerKind.DENSE, LayerKind.PRUNED))
        network.layers[1].input_mask.data[:] = 0.0
        with self.assertRaises(DegenerateModelError):
            extract_compressed(network)

    def test_lowest_rung_switched_off(self):
        network = self.tiny_network(
            widths=(4, 3), kinds=(LayerKind.QUANTIZED,), bit_ladder=(1, 2), full_bit_ladder=True, norm=NormKind.NONE
        )
        network.layers[0].bit_masks.data = np.array([0.0, 1.0])
        with self.assertRaises(DegenerateModelError):
            extract_compressed(network)

    def test_input_shape_checked(self):
        model = extract_compressed(self.tiny_network(widths=(4, 3), kinds=(LayerKind.DENSE,)))
        with self.assertRaises(ShapeMismatchError):
            model(np.zeros((2, 5)))


class TestPersistence(PruneTapeTestCase):
    def trained(self):
        network = self.tiny_network(widths=(6, 5, 2), kinds=(LayerKind.PRUNED, LayerKind.QUANTIZED), bit_ladder=(2, 4))
        train(network, self.tiny_clusters(), self.tiny_config(lam=0.05))
        network.project_bit_masks()
        return network

    def test_extracted_json(self):
        network = self.trained()
        model = extract_compressed(network, metadata={"run": "demo"})
        path = save_extracted(model, self.tmp / "out" / "extracted.json")
        loaded = load_extracted(path)
        x = self.rng.standard_normal((8, 6))
        np.testing.assert_allclose(loaded(x), model(x), atol=1e-12)
        self.assertEqual(loaded.metadata, {"run": "demo"})
        self.assertEqual(loaded.source_checksum, network.checksum())
        self.assertEqual(json.loads(path.read_text())["exact_macs"], model.exact_macs)

    def test_unknown_format(self):
        with self.assertRaises(ValueError):
            ExtractedModel.from_dict({"format": 99, "input_dim": 1, "layers": []})

    def test_checkpoint(self):
        network = self.trained()
        path = save_checkpoint(network, self.tmp / "checkpoint.json", extracted=extract_compressed(network))
        restored = load_checkpoint(path)
        self.assertEqual(restored.checksum(), network.checksum())
        self.assertEqual(restored.layers[1].ranges, network.layers[1].ranges)
        x = self.rng.standard_normal((8, 6))
        np.testing.assert_allclose(extract_compressed(restored)(x), extract_compressed(network)(x), atol=1e-12)

    def test_missing_checkpoint(self):
        with self.assertRaises(ConfigError):
            load_checkpoint(self.tmp / "nothing.json")

    def test_not_a_checkpoint(self):
        path = self.tmp / "junk.json"
        path.write_text('{"hello": 1}')
        with self.assertRaises(ConfigError):
            load_checkpoint(path)
