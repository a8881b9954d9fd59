"""
Matrix-vector latency lookup tables.

Entry (d1, d2) is the time in milliseconds to multiply a d1 x d2 matrix by a
length-d2 vector. Indices equal dimensions, so row and column 0 exist and
hold 0 ms. Queries at fractional indices are bilinear and differentiable.
"""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from prunetape.constants import (
    MIN_TIMED_SECONDS,
    PROVENANCE_INTERPOLATED,
    PROVENANCE_MEASURED,
    TABLE_MAGIC,
    TABLE_VERSION,
)
from prunetape.exceptions import TableCoverageError, TableFormatError, UnsupportedParameterizationError
from prunetape.schemas import LayerKind, ProfileConfig, SurrogateKind
from prunetape.surrogates import MaskLike, l1_count, l1l2_count
from prunetape.tensor import Function, Tensor

if TYPE_CHECKING:
    from prunetape.extraction import ExtractedModel
    from prunetape.network import CompressibleNetwork

logger = logging.getLogger(__name__)

Profiler = Callable[[int, int, ProfileConfig], float]


@dataclass(frozen=True, eq=False)
class LatencyTable:
    """Dense latency grid plus a per-entry provenance flag ('m' measured, 'i' interpolated)."""

    entries: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2 or min(self.entries.shape) < 2:
            raise TableFormatError(f"A latency table needs at least 2x2 entries, got shape {self.entries.shape}")
        if self.provenance.shape != self.entries.shape:
            raise TableFormatError(
                f"Provenance shape {self.provenance.shape} does not match entries {self.entries.shape}"
            )
        if not np.all(np.isfinite(self.entries)) or (self.entries < 0).any():
            raise TableFormatError("Latency entries must be finite and nonnegative")
        self.entries.setflags(write=False)
        self.provenance.setflags(write=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @property
    def max_in(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def max_out(self) -> int:
        return self.entries.shape[1] - 1

    @property
    def measured_fraction(self) -> float:
        return float(np.mean(self.provenance == PROVENANCE_MEASURED))

    def covers(self, d_in: int, d_out: int) -> bool:
        return d_in <= self.max_in and d_out <= self.max_out

    def require(self, d_in: int, d_out: int, where: str) -> None:
        if not self.covers(d_in, d_out):
            raise TableCoverageError(
                f"{where} needs a {d_in}x{d_out} matvec but the table covers up to {self.max_in}x{self.max_out}"
            )

    def lookup(self, x: float, y: float) -> float:
        return interpolate(self, Tensor(x), Tensor(y)).item()

    def model_latency(self, model: "ExtractedModel") -> float:
        """Sum of the table entries of every matvec an extracted model runs."""
        total = 0.0
        for layer in model.layers:
            for d_in, d_out in layer.matvec_dims():
                self.require(d_in, d_out, layer.name)
                total += float(self.entries[d_in, d_out])
        return total

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LatencyTable):
            return NotImplemented
        return np.array_equal(self.entries, other.entries) and np.array_equal(self.provenance, other.provenance)


# --- profiling ---


def robust_latency(samples: Sequence[float]) -> float:
    """Median of the repetitions."""
    if len(samples) == 0:
        raise ValueError("No latency samples to summarize")
    return float(np.median(np.asarray(samples, dtype=np.float64)))


def _timed(matrix: np.ndarray, vector: np.ndarray, inner: int) -> float:
    start = time.perf_counter()
    for _ in range(inner):
        matrix @ vector
    return time.perf_counter() - start


def profile_matvec(d1: int, d2: int, config: ProfileConfig) -> float:
    """
    Median wall-clock milliseconds of a d1 x d2 matvec on this host.

    Runs shorter than MIN_TIMED_SECONDS are repeated in a batched inner loop and
    divided by the loop length.
    """
    if d1 < 1 or d2 < 1:
        raise ValueError(f"Matvec dims must be >= 1, got ({d1}, {d2})")
    rng = np.random.default_rng(config.seed)
    matrix = rng.standard_normal((d1, d2))
    vector = rng.standard_normal(d2)

    _timed(matrix, vector, config.warmup)
    inner = 1
    while _timed(matrix, vector, inner) < MIN_TIMED_SECONDS and inner < (1 << 20):
        inner *= 2

    samples = [_timed(matrix, vector, inner) / inner * 1e3 for _ in range(config.repetitions)]
    return robust_latency(samples)


def axis_points(cap: int, theta: int, iterations: int) -> List[int]:
    """
    Every dim in (cap - theta, cap], plus midpoints of (0, cap - theta]: take
    floor((lo + hi) / 2), keep it if >= 1, move lo up to it, repeat.
    """
    if not 1 <= theta < cap:
        raise ValueError(f"theta must satisfy 1 <= theta < cap, got theta={theta}, cap={cap}")
    points: Set[int] = set(range(cap - theta + 1, cap + 1))
    lo, hi = 0, cap - theta
    for _ in range(iterations):
        mid = (lo + hi) // 2
        if mid >= 1:
            points.add(mid)
        lo = mid
    return sorted(points)


def sample_points(beta: int, gamma: int, theta: int, iterations: int) -> List[Tuple[int, int]]:
    rows = axis_points(beta, theta, iterations)
    cols = axis_points(gamma, theta, iterations)
    return [(r, c) for r in rows for c in cols]


def fill_table(rows: Sequence[int], cols: Sequence[int], measured: np.ndarray) -> LatencyTable:
    """
    Densify measurements taken on a rows x cols tensor-product grid.

    Row and column 0 are pinned to 0 ms; everything else that was not measured is
    linearly interpolated from its measured neighbours.
    """
    measured = np.asarray(measured, dtype=np.float64)
    if measured.shape != (len(rows), len(cols)):
        raise ValueError(f"Expected {len(rows)}x{len(cols)} measurements, got {measured.shape}")
    row_axis = np.array([0] + list(rows), dtype=np.float64)
    col_axis = np.array([0] + list(cols), dtype=np.float64)
    grid = np.zeros((len(row_axis), len(col_axis)))
    grid[1:, 1:] = measured

    interpolator = RegularGridInterpolator((row_axis, col_axis), grid, method="linear")
    n_rows, n_cols = int(row_axis[-1]) + 1, int(col_axis[-1]) + 1
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    entries = interpolator(np.stack([ii.ravel(), jj.ravel()], axis=-1)).reshape(n_rows, n_cols)

    provenance = np.full((n_rows, n_cols), PROVENANCE_INTERPOLATED)
    provenance[0, :] = PROVENANCE_MEASURED
    provenance[:, 0] = PROVENANCE_MEASURED
    entries[0, :] = 0.0
    entries[:, 0] = 0.0
    for a, r in enumerate(rows):
        for b, c in enumerate(cols):
            entries[r, c] = measured[a, b]
            provenance[r, c] = PROVENANCE_MEASURED

    non_monotone = int(np.sum(np.diff(measured, axis=0) < 0) + np.sum(np.diff(measured, axis=1) < 0))
    if non_monotone:
        logger.warning(f"{non_monotone} adjacent measurement pair(s) decrease with size (timer noise)")
    return LatencyTable(entries=np.maximum(entries, 0.0), provenance=provenance)


def build_table(config: ProfileConfig, profiler: Profiler = profile_matvec) -> LatencyTable:
    """Profile the sampled (d1, d2) points and fill the rest of the grid."""
    rows = axis_points(config.max_in, config.theta, config.midpoint_iterations)
    cols = axis_points(config.max_out, config.theta, config.midpoint_iterations)
    logger.info(f"Profiling {len(rows) * len(cols)} matvec shapes up to {config.max_in}x{config.max_out}")
    measured = np.zeros((len(rows), len(cols)))
    for a, d1 in enumerate(rows):
        for b, d2 in enumerate(cols):
            measured[a, b] = profiler(d1, d2, config)
        logger.debug(f"Row d1={d1} done ({a + 1}/{len(rows)})")
    return fill_table(rows, cols, measured)


# --- interpolation ---


def _cell(coord: float, extent: int) -> int:
    """Lower-left cell containing `coord`; a knot belongs to the cell below it."""
    return min(max(int(math.ceil(coord)) - 1, 0), extent - 2)


class TableLookup(Function):
    """Bilinear interpolation of a LatencyTable at (x, y), clamped to the grid."""

    op_name = "table_lookup"

    def forward(self, x, y, table: Optional[LatencyTable] = None):
        xv, yv = float(x), float(y)
        if math.isnan(xv) or math.isnan(yv):
            raise ValueError(f"Latency table query must be a number, got ({xv}, {yv})")
        t = table.entries
        n_rows, n_cols = t.shape
        cx = min(max(xv, 0.0), n_rows - 1.0)
        cy = min(max(yv, 0.0), n_cols - 1.0)
        i, j = _cell(cx, n_rows), _cell(cy, n_cols)
        fx, fy = cx - i, cy - j
        t00, t10, t01, t11 = t[i, j], t[i + 1, j], t[i, j + 1], t[i + 1, j + 1]

        # Outside the grid the clamped coordinate no longer moves with the query.
        self.dx = 0.0 if cx != xv else (1.0 - fy) * (t10 - t00) + fy * (t11 - t01)
        self.dy = 0.0 if cy != yv else (1.0 - fx) * (t01 - t00) + fx * (t11 - t10)
        value = (1.0 - fx) * (1.0 - fy) * t00 + fx * (1.0 - fy) * t10 + (1.0 - fx) * fy * t01 + fx * fy * t11
        return np.asarray(value)

    def backward(self, grad):
        return np.asarray(grad * self.dx), np.asarray(grad * self.dy)


def interpolate(table: LatencyTable, x: Tensor, y: Tensor) -> Tensor:
    if x.size != 1 or y.size != 1:
        raise ValueError(f"Latency table queries are scalars, got shapes {x.shape} and {y.shape}")
    return TableLookup.apply(x.reshape(), y.reshape(), table=table)


# --- regularizer ---

LATENCY_KINDS = (LayerKind.DENSE, LayerKind.PRUNED, LayerKind.PRUNE_LOW_RANK)


class LatencyRegularizer:
    """
    Sum over layers of table lookups indexed by mask counts.

    Pruned (and dense) layers cost T(count(alpha_i), count(alpha_next)); prune +
    low-rank layers run two matvecs and cost T(count(alpha_i), count(beta)) +
    T(count(beta), count(alpha_next)).
    """

    def __init__(
        self,
        network: "CompressibleNetwork",
        table: LatencyTable,
        surrogate: SurrogateKind = SurrogateKind.L1L2,
    ):
        for layer in network.layers:
            if layer.kind not in LATENCY_KINDS:
                raise UnsupportedParameterizationError(
                    f"The latency cost is defined for pruned and prune+low-rank layers, "
                    f"{layer.name} is {layer.kind.value}"
                )
            if layer.kind.is_low_rank:
                table.require(layer.in_dim, layer.rank, layer.name)
                table.require(layer.rank, layer.out_dim, layer.name)
            else:
                table.require(layer.in_dim, layer.out_dim, layer.name)
        self.network = network
        self.table = table
        self.count: Callable[[MaskLike], Tensor] = l1_count if surrogate == SurrogateKind.L1 else l1l2_count

    def input_count(self, index: int) -> Tensor:
        layer = self.network.layers[index]
        if layer.input_mask is None:
            return Tensor(float(layer.in_dim))
        return self.count(layer.input_mask)

    def __call__(self) -> Tensor:
        total: Tensor = Tensor(0.0)
        for i, layer in enumerate(self.network.layers):
            x = self.input_count(i)
            y = self.count(self.network.next_mask(i))
            if layer.kind.is_low_rank:
                r = self.count(layer.rank_mask)
                total = total + interpolate(self.table, x, r) + interpolate(self.table, r, y)
            else:
                total = total + interpolate(self.table, x, y)
        return total


def latency_reg(
    network: "CompressibleNetwork",
    table: LatencyTable,
    surrogate: SurrogateKind = SurrogateKind.L1L2,
) -> Tensor:
    return LatencyRegularizer(network, table, surrogate)()


# --- persistence ---


def _format_value(value: float) -> str:
    return repr(float(value))


def save_table(table: LatencyTable, path: Union[str, Path]) -> Path:
    """Write the v1 CSV: header line, one line per row, then the provenance flags."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_rows, n_cols = table.shape
    buffer = io.StringIO()
    buffer.write(f"{TABLE_MAGIC} {TABLE_VERSION} {n_rows} {n_cols}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    for row in table.entries:
        writer.writerow([_format_value(v) for v in row])
    for row in table.provenance:
        writer.writerow(list(row))
    path.write_text(buffer.getvalue(), encoding="utf-8")
    logger.info(f"Latency table {n_rows}x{n_cols} written to {path}")
    return path


def _parse_header(line: str) -> Tuple[int, int]:
    tokens = line.split()
    if len(tokens) != 4 or tokens[0] != TABLE_MAGIC:
        raise TableFormatError(f"line 1: expected '{TABLE_MAGIC} {TABLE_VERSION} D1 D2', got {line!r}")
    if tokens[1] != TABLE_VERSION:
        raise TableFormatError(f"line 1: unsupported table version {tokens[1]!r}")
    try:
        n_rows, n_cols = int(tokens[2]), int(tokens[3])
    except ValueError:
        raise TableFormatError(f"line 1: dimensions must be integers, got {tokens[2]!r} {tokens[3]!r}") from None
    if n_rows < 2 or n_cols < 2:
        raise TableFormatError(f"line 1: dimensions must be >= 2, got {n_rows}x{n_cols}")
    return n_rows, n_cols


def load_table(path: Union[str, Path]) -> LatencyTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise TableFormatError(f"{path} is not UTF-8 text") from e
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TableFormatError(f"{path} is empty")
    n_rows, n_cols = _parse_header(lines[0])

    rows = list(csv.reader(lines[1:]))
    entries = np.zeros((n_rows, n_cols))
    for r in range(n_rows):
        if r >= len(rows):
            raise TableFormatError(f"Header declares {n_rows}x{n_cols} but row {r + 1} is missing")
        cells = rows[r]
        if len(cells) != n_cols:
            raise TableFormatError(f"row {r + 1}: expected {n_cols} values, got {len(cells)}")
        for c, cell in enumerate(cells):
            try:
                value = float(cell)
            except ValueError:
                raise TableFormatError(f"row {r + 1}, column {c + 1}: {cell!r} is not a number") from None
            if not math.isfinite(value) or value < 0:
                raise TableFormatError(f"row {r + 1}, column {c + 1}: latency must be finite and >= 0, got {value}")
            entries[r, c] = value

    flag_rows = rows[n_rows:]
    if not flag_rows:
        provenance = np.full((n_rows, n_cols), PROVENANCE_MEASURED)
    else:
        if len(flag_rows) != n_rows:
            raise TableFormatError(f"Provenance block has {len(flag_rows)} rows, expected {n_rows}")
        provenance = np.empty((n_rows, n_cols), dtype="<U1")
        for r, cells in enumerate(flag_rows):
            if len(cells) != n_cols:
                raise TableFormatError(f"provenance row {r + 1}: expected {n_cols} flags, got {len(cells)}")
            for c, flag in enumerate(cells):
                if flag not in (PROVENANCE_MEASURED, PROVENANCE_INTERPOLATED):
                    raise TableFormatError(f"provenance row {r + 1}, column {c + 1}: unknown flag {flag!r}")
                provenance[r, c] = flag
    return LatencyTable(entries=entries, provenance=provenance)
