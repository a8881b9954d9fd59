import numpy as np

from prunetape.exceptions import TableCoverageError, TableFormatError, UnsupportedParameterizationError
from prunetape.latency import (
    LatencyTable,
    axis_points,
    build_table,
    fill_table,
    interpolate,
    latency_reg,
    load_table,
    profile_matvec,
    robust_latency,
    sample_points,
    save_table,
)
from prunetape.schemas import LayerKind, NormKind, ProfileConfig, SurrogateKind
from prunetape.tensor import Parameter, Tensor, backward
from tests.base import PruneTapeTestCase


def table_of(entries) -> LatencyTable:
    entries = np.asarray(entries, dtype=np.float64)
    return LatencyTable(entries=entries, provenance=np.full(entries.shape, "m"))


def linear_table(n_rows: int, n_cols: int) -> LatencyTable:
    """T[i][j] = i * j, which bilinear interpolation reproduces exactly."""
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    return table_of(ii * jj * 0.01)


class TestSampling(PruneTapeTestCase):
    def test_midpoint_trace(self):
        self.assertEqual(axis_points(8, 2, 2), [3, 4, 7, 8])
        self.assertEqual(sample_points(8, 8, 2, 2), [(r, c) for r in (3, 4, 7, 8) for c in (3, 4, 7, 8)])

    def test_no_midpoint_iterations(self):
        self.assertEqual(axis_points(8, 2, 0), [7, 8])

    def test_theta_one_below_cap(self):
        self.assertEqual(axis_points(5, 4, 3), [2, 3, 4, 5])

    def test_invalid_theta(self):
        with self.assertRaises(ValueError):
            axis_points(4, 4, 1)

    def test_median(self):
        self.assertEqual(robust_latency([3.0, 1.0, 2.0]), 2.0)

    def test_profile_matvec(self):
        config = ProfileConfig(max_in=8, max_out=8, theta=2, repetitions=3, warmup=1)
        latency = profile_matvec(8, 4, config)
        self.assertGreater(latency, 0.0)
        self.assertTrue(np.isfinite(latency))

    def test_profile_matvec_rejects_empty_dims(self):
        config = ProfileConfig(max_in=8, max_out=8, theta=2, repetitions=3, warmup=0)
        with self.assertRaises(ValueError):
            profile_matvec(0, 4, config)


class TestFill(PruneTapeTestCase):
    def test_measured_knots_are_kept(self):
        rows, cols = [2, 4], [2, 4]
        measured = np.array([[1.0, 2.0], [3.0, 5.0]])
        table = fill_table(rows, cols, measured)
        self.assertEqual(table.shape, (5, 5))
        self.assertEqual(table.entries[4, 4], 5.0)
        self.assertEqual(table.provenance[4, 4], "m")
        self.assertEqual(table.provenance[3, 3], "i")
        np.testing.assert_array_equal(table.entries[0, :], 0.0)
        np.testing.assert_array_equal(table.entries[:, 0], 0.0)
        self.assertAlmostEqual(table.entries[3, 4], 3.5)

    def test_build_with_stub_profiler(self):
        config = ProfileConfig(max_in=6, max_out=5, theta=2, midpoint_iterations=1)
        table = build_table(config, profiler=lambda d1, d2, cfg: 0.001 * d1 * d2)
        self.assertEqual(table.shape, (7, 6))
        self.assertTrue(table.covers(6, 5))
        self.assertFalse(table.covers(7, 5))
        self.assertGreater(table.measured_fraction, 0.0)
        self.assertAlmostEqual(table.entries[6, 5], 0.03)


class TestInterpolation(PruneTapeTestCase):
    def test_hand_values(self):
        table = table_of([[0.0, 2.0], [4.0, 6.0]])
        self.assertAlmostEqual(table.lookup(0.5, 0.5), 3.0)
        self.assertAlmostEqual(table.lookup(0.5, 0.0), 2.0)

    def test_knots_are_reproduced(self):
        table = table_of(self.rng.uniform(0, 1, (6, 7)))
        self.assertEqual(table.lookup(3, 5), table.entries[3, 5])

    def test_clamped_query_has_zero_gradient_along_that_axis(self):
        table = linear_table(4, 4)
        x = Parameter([10.0], name="x")
        y = Parameter([1.5], name="y")
        out = interpolate(table, x, y)
        self.assertAlmostEqual(out.item(), table.lookup(3.0, 1.5))
        backward(out)
        self.assertEqual(float(x.grad[0]), 0.0)
        self.assertAlmostEqual(float(y.grad[0]), 0.03)

    def test_gradient_inside_a_cell(self):
        table = table_of(self.rng.uniform(0, 1, (5, 5)))
        x = Parameter([1.3], name="x")
        y = Parameter([2.6], name="y")
        self.assertGradientMatches(lambda: interpolate(table, x, y), [x, y], eps=1e-7, rtol=1e-5)

    def test_nan_query_rejected(self):
        with self.assertRaises(ValueError):
            table_of([[0.0, 1.0], [1.0, 2.0]]).lookup(float("nan"), 0.0)

    def monotone_table(self, n_rows: int = 7, n_cols: int = 6) -> LatencyTable:
        return table_of(np.cumsum(np.cumsum(self.rng.uniform(0, 1, (n_rows, n_cols)), axis=0), axis=1))

    def test_monotone_table_gives_monotone_rays(self):
        for _ in range(20):
            table = self.monotone_table()
            n_rows, n_cols = table.shape
            ray = np.linspace(0.0, n_rows - 1.0, 97)
            for y in self.rng.uniform(0, n_cols - 1, 3):
                values = [table.lookup(x, y) for x in ray]
                self.assertTrue(np.all(np.diff(values) >= -1e-12))
            ray = np.linspace(0.0, n_cols - 1.0, 97)
            for x in self.rng.uniform(0, n_rows - 1, 3):
                values = [table.lookup(x, y) for y in ray]
                self.assertTrue(np.all(np.diff(values) >= -1e-12))

    def test_continuous_across_cell_edges(self):
        table = table_of(self.rng.uniform(0, 1, (6, 6)))
        for edge in (1.0, 2.0, 3.0, 4.0):
            for other in self.rng.uniform(0, 5, 4):
                at = table.lookup(edge, other)
                self.assertAlmostEqual(table.lookup(edge - 1e-12, other), at, delta=1e-9)
                self.assertAlmostEqual(table.lookup(edge + 1e-12, other), at, delta=1e-9)
                at = table.lookup(other, edge)
                self.assertAlmostEqual(table.lookup(other, edge - 1e-12), at, delta=1e-9)
                self.assertAlmostEqual(table.lookup(other, edge + 1e-12), at, delta=1e-9)

    def test_gradient_at_interior_knot_uses_lower_left_cell(self):
        table = table_of(self.rng.uniform(0, 1, (5, 5)))
        t = table.entries
        x = Parameter([2.0], name="x")
        y = Parameter([3.0], name="y")
        out = interpolate(table, x, y)
        self.assertEqual(out.item(), t[2, 3])
        backward(out)
        self.assertAlmostEqual(float(x.grad[0]), t[2, 3] - t[1, 3])
        self.assertAlmostEqual(float(y.grad[0]), t[2, 3] - t[2, 2])


class TestLatencyRegularizer(PruneTapeTestCase):
    def test_all_ones_hits_grid_knots(self):
        network = self.tiny_network(widths=(8, 4), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        table = table_of(self.rng.uniform(0, 1, (9, 5)))
        self.assertAlmostEqual(latency_reg(network, table).item(), table.entries[8, 4])

    def test_all_ones_lookup_is_exact(self):
        network = self.tiny_network(widths=(3, 12), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        table = table_of(self.rng.uniform(0, 1, (4, 13)))
        network.layers[0].input_mask.data = np.full(3, 0.7)
        self.assertEqual(latency_reg(network, table).item(), table.entries[3, 12])

    def test_mask_scale_does_not_move_the_index(self):
        network = self.tiny_network(widths=(8, 4), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        table = table_of(self.rng.uniform(0, 1, (9, 5)))
        network.layers[0].input_mask.data = self.rng.uniform(0.2, 1.0, 8)
        before = latency_reg(network, table).item()
        network.layers[0].input_mask.data *= 5.0
        self.assertAlmostEqual(latency_reg(network, table).item(), before)

    def test_fractional_row_index(self):
        network = self.tiny_network(widths=(4, 4), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        network.layers[0].input_mask.data = np.array([3.0, 4.0, 0.0, 0.0])
        table = linear_table(5, 5)
        self.assertAlmostEqual(latency_reg(network, table).item(), 0.01 * 2.8 * 4)

    def test_l1_variant_is_scale_sensitive(self):
        network = self.tiny_network(widths=(4, 4), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        network.layers[0].input_mask.data = np.full(4, 0.5)
        table = linear_table(5, 5)
        self.assertAlmostEqual(latency_reg(network, table, SurrogateKind.L1).item(), 0.01 * 2.0 * 4)

    def test_prune_low_rank_uses_two_lookups(self):
        network = self.tiny_network(widths=(6, 4), kinds=(LayerKind.PRUNE_LOW_RANK,), norm=NormKind.NONE)
        network.layers[0].rank_mask.data = np.ones(4)
        table = linear_table(7, 7)
        self.assertAlmostEqual(latency_reg(network, table).item(), 0.01 * (6 * 4 + 4 * 4))

    def test_gradient_reaches_masks(self):
        network = self.tiny_network(widths=(5, 4, 3), kinds=(LayerKind.PRUNED, LayerKind.PRUNED))
        network.layers[0].input_mask.data = self.rng.uniform(0.1, 1.0, 5)
        network.layers[1].input_mask.data = self.rng.uniform(0.1, 1.0, 4)
        table = table_of(np.cumsum(np.cumsum(self.rng.uniform(0, 1, (6, 6)), axis=0), axis=1))
        params = [network.layers[0].input_mask, network.layers[1].input_mask]
        self.assertGradientMatches(lambda: latency_reg(network, table), params, rtol=1e-4, atol=1e-6)

    def test_small_table_rejected(self):
        network = self.tiny_network(widths=(8, 4), kinds=(LayerKind.PRUNED,), norm=NormKind.NONE)
        with self.assertRaises(TableCoverageError):
            latency_reg(network, linear_table(5, 5))

    def test_unsupported_kind_rejected(self):
        network = self.tiny_network(widths=(4, 3), kinds=(LayerKind.QUANTIZED,), norm=NormKind.NONE)
        with self.assertRaises(UnsupportedParameterizationError):
            latency_reg(network, linear_table(5, 5))


class TestTableFile(PruneTapeTestCase):
    def test_save_then_load(self):
        table = fill_table([2, 3], [1, 3], self.rng.uniform(0.1, 1.0, (2, 2)))
        path = save_table(table, self.tmp / "table.csv")
        self.assertEqual(load_table(path), table)
        self.assertTrue(path.read_text().startswith("latency-table v1 4 4\n"))

    def test_missing_row_is_named(self):
        path = self.tmp / "short.csv"
        path.write_text("latency-table v1 4 4\n0,0,0,0\n0,1,2,3\n0,2,4,6\n")
        with self.assertRaises(TableFormatError) as ctx:
            load_table(path)
        self.assertIn("row 4", str(ctx.exception))

    def test_non_numeric_cell_is_located(self):
        path = self.tmp / "bad.csv"
        path.write_text("latency-table v1 2 2\n0,0\n0,abc\n")
        with self.assertRaises(TableFormatError) as ctx:
            load_table(path)
        self.assertIn("row 2, column 2", str(ctx.exception))

    def test_bad_header(self):
        path = self.tmp / "bad.csv"
        path.write_text("latency v2 2 2\n0,0\n0,1\n")
        with self.assertRaises(TableFormatError):
            load_table(path)

    def test_provenance_block_is_optional(self):
        path = self.tmp / "plain.csv"
        path.write_text("latency-table v1 2 2\n0,0\n0,1.5\n")
        table = load_table(path)
        self.assertEqual(table.lookup(1, 1), 1.5)
        self.assertEqual(table.measured_fraction, 1.0)

    def test_tensor_queries(self):
        table = table_of([[0.0, 2.0], [4.0, 6.0]])
        self.assertAlmostEqual(interpolate(table, Tensor(1.0), Tensor(1.0)).item(), 6.0)
