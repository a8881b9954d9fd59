import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from prunetape.constants import BIT_MASK_THRESHOLD, DEFAULT_BIT_LADDER
from prunetape.exceptions import (
    DecompositionError,
    InvalidMaskError,
    InvalidRangeError,
    ShapeMismatchError,
)
from prunetape.functional import round_ste
from prunetape.schemas import LayerKind, MaskInit, Projection
from prunetape.tensor import Div, Parameter, Tensor, wrap

logger = logging.getLogger(__name__)


def clip(weights: Tensor, r_l: float, r_u: float) -> Tensor:
    """
    Clamp to [r_l, r_u] as r_u - ReLU(r_u - r_l - ReLU(W - r_l)).

    The double-ReLU form keeps the clamp inside the graph.
    """
    if not r_l < r_u:
        raise InvalidRangeError(f"Quantization range must satisfy r_l < r_u, got [{r_l}, {r_u}]")
    w = wrap(weights)
    return r_u - ((r_u - r_l) - (w - r_l).relu()).relu()


def quantize_b(weights: Tensor, r_l: float, r_u: float, bits: int) -> Tensor:
    """
    Snap each entry to the nearest of 2^bits uniformly spaced points over [r_l, r_u].

    Rounding goes through the straight-through estimator, so the gradient is
    that of the clamp.
    """
    if bits < 1:
        raise InvalidRangeError(f"Bit width must be >= 1, got {bits}")
    step = (r_u - r_l) / (2**bits - 1)
    levels = round_ste(Div.apply(clip(weights, r_l, r_u) - r_l, Tensor(step)))
    return r_l + levels * step


def quantize_array(weights: np.ndarray, r_l: float, r_u: float, bits: int) -> np.ndarray:
    """Graph-free `quantize_b`."""
    return quantize_b(Tensor(weights), r_l, r_u, bits).data


def svd_init(weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Thin SVD: returns (U, beta, V) with U diag(beta) V == W, beta nonnegative
    and nonincreasing, U with orthonormal columns and V with orthonormal rows.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise DecompositionError(f"SVD warm start expects a matrix, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        bad = int(np.size(weights) - np.count_nonzero(np.isfinite(weights)))
        raise DecompositionError(f"Cannot factor a {weights.shape} matrix with {bad} non-finite entries")
    try:
        u, s, vt = np.linalg.svd(weights, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise DecompositionError(
            f"SVD did not converge for a {weights.shape} matrix "
            f"(Frobenius norm {np.linalg.norm(weights):.6g})"
        ) from e
    return u, s, vt


def default_range(weights: np.ndarray) -> Tuple[float, float]:
    """Quantization range fixed at the min/max of the warm-start weights."""
    lo, hi = float(np.min(weights)), float(np.max(weights))
    if lo == hi:
        pad = 0.5 * max(abs(lo), 1.0)
        lo, hi = lo - pad, hi + pad
    return lo, hi


def _init_mask(shape, mask_init: MaskInit, rng: np.random.Generator) -> np.ndarray:
    if mask_init == MaskInit.UNIFORM:
        return rng.uniform(0.0, 0.5, size=shape)
    return np.ones(shape)


class CompressibleLayer:
    """
    One dense layer y = x W_eff^T + b whose W_eff is re-parameterized by `kind`.

    Mask parameters (input_mask, matrix_mask, rank_mask) are projected to be
    nonnegative by the optimizer; bit masks are projected into [0, 1].
    """

    def __init__(
        self,
        kind: LayerKind,
        in_dim: int,
        out_dim: int,
        name: str,
        bit_ladder: Sequence[int] = DEFAULT_BIT_LADDER,
        full_bit_ladder: bool = False,
    ):
        self.kind = LayerKind(kind)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.bit_ladder: Tuple[int, ...] = tuple(bit_ladder)
        self.full_bit_ladder = full_bit_ladder

        self.weight: Optional[Parameter] = None
        self.bias: Optional[Parameter] = None
        self.input_mask: Optional[Parameter] = None
        self.matrix_mask: Optional[Parameter] = None
        self.u: Optional[Parameter] = None
        self.rank_mask: Optional[Parameter] = None
        self.v: Optional[Parameter] = None
        self.bit_masks: Optional[Parameter] = None
        self.ranges: Dict[int, Tuple[float, float]] = {}

    @classmethod
    def from_weight(
        cls,
        kind: LayerKind,
        weight: np.ndarray,
        name: str,
        bias: Optional[np.ndarray] = None,
        bit_ladder: Sequence[int] = DEFAULT_BIT_LADDER,
        full_bit_ladder: bool = False,
        mask_init: MaskInit = MaskInit.ONES,
        rng: Optional[np.random.Generator] = None,
    ) -> "CompressibleLayer":
        """Warm-start a layer of `kind` from a dense (out, in) weight matrix."""
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ShapeMismatchError(f"Layer weights must be (out, in), got {weight.shape}")
        rng = rng if rng is not None else np.random.default_rng(0)
        out_dim, in_dim = weight.shape
        layer = cls(kind, in_dim, out_dim, name, bit_ladder=bit_ladder, full_bit_ladder=full_bit_ladder)
        kind = layer.kind

        if kind.is_low_rank:
            u, s, vt = svd_init(weight)
            layer.u = Parameter(u, name=f"{name}.u")
            layer.rank_mask = Parameter(s, name=f"{name}.rank_mask", projection=Projection.NONNEGATIVE)
            layer.v = Parameter(vt, name=f"{name}.v")
        else:
            layer.weight = Parameter(weight, name=f"{name}.weight")

        if kind.has_input_mask:
            layer.input_mask = Parameter(
                _init_mask((in_dim,), mask_init, rng),
                name=f"{name}.input_mask",
                projection=Projection.NONNEGATIVE,
            )
        if kind.has_matrix_mask:
            layer.matrix_mask = Parameter(
                _init_mask((out_dim, in_dim), mask_init, rng),
                name=f"{name}.matrix_mask",
                projection=Projection.NONNEGATIVE,
            )
        if kind.is_quantized:
            lo, hi = default_range(weight)
            layer.ranges = {b: (lo, hi) for b in layer.bit_ladder}
            n_masks = len(layer.bit_ladder) - 1 + (1 if full_bit_ladder else 0)
            # Start every ladder at its widest rung.
            layer.bit_masks = Parameter(
                np.ones(n_masks), name=f"{name}.bit_masks", projection=Projection.UNIT_INTERVAL
            )

        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64)
            if bias.shape != (out_dim,):
                raise ShapeMismatchError(f"Bias shape {bias.shape} does not match out_dim {out_dim}")
            layer.bias = Parameter(bias, name=f"{name}.bias")
        return layer

    @property
    def rank(self) -> int:
        return min(self.in_dim, self.out_dim)

    def set_range(self, bits: int, r_l: float, r_u: float) -> None:
        """Override the quantization range of one rung."""
        if bits not in self.ranges:
            raise InvalidRangeError(f"{self.name} has no {bits}-bit rung (ladder {self.bit_ladder})")
        if not r_l < r_u:
            raise InvalidRangeError(f"Quantization range must satisfy r_l < r_u, got [{r_l}, {r_u}]")
        self.ranges[bits] = (float(r_l), float(r_u))

    def parameters(self) -> List[Parameter]:
        candidates = [
            self.weight,
            self.u,
            self.rank_mask,
            self.v,
            self.input_mask,
            self.matrix_mask,
            self.bit_masks,
            self.bias,
        ]
        # A one-rung ladder has an empty bit_masks array; nothing to train or record.
        return [p for p in candidates if p is not None and p.size > 0]

    def masks(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.is_mask]

    # --- bit ladder ---

    def rung_mask(self, rung: int) -> Tensor:
        """Mask gating rung `rung` of the ladder; the lowest rung is always on unless the full ladder is searched."""
        assert self.bit_masks is not None, f"{self.name} is not quantized"
        if self.full_bit_ladder:
            return self.bit_masks[rung]
        if rung == 0:
            return Tensor(1.0)
        return self.bit_masks[rung - 1]

    def check_bit_masks(self) -> None:
        if self.bit_masks is None:
            return
        values = self.bit_masks.data
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InvalidMaskError(
                f"Bit masks of {self.name} must lie in [0, 1], got range [{values.min()}, {values.max()}]"
            )

    def quantization_levels(self) -> List[Tensor]:
        assert self.weight is not None
        return [quantize_b(self.weight, *self.ranges[b], b) for b in self.bit_ladder]

    def _ladder_weight(self) -> Tensor:
        """
        W_1 + m_2 (W_2 - W_1 + m_4 (W_4 - W_2 + ...)), built inside out, gated by
        m_1 when the full ladder is searched.
        """
        self.check_bit_masks()
        levels = self.quantization_levels()
        acc: Optional[Tensor] = None
        for k in range(len(levels) - 1, 0, -1):
            delta = levels[k] - levels[k - 1]
            acc = self.rung_mask(k) * (delta if acc is None else delta + acc)
        out = levels[0] if acc is None else levels[0] + acc
        if self.full_bit_ladder:
            out = self.rung_mask(0) * out
        return out

    def projected_bit_masks(self) -> np.ndarray:
        assert self.bit_masks is not None
        return (self.bit_masks.data >= BIT_MASK_THRESHOLD).astype(np.float64)

    def selected_bits(self) -> int:
        """Bit width chosen by the 0/1-projected ladder masks (0 if the lowest rung is off)."""
        if not self.kind.is_quantized:
            raise ValueError(f"{self.name} is not a quantized layer")
        projected = self.projected_bit_masks()
        if self.full_bit_ladder:
            gates = list(projected)
        else:
            gates = [1.0] + list(projected)
        bits = 0
        for rung, gate in enumerate(gates):
            if gate < 1.0:
                break
            bits = self.bit_ladder[rung]
        return bits

    # --- forward ---

    def effective_weight(self) -> Tensor:
        kind = self.kind
        if kind == LayerKind.DENSE:
            return self.weight
        if kind == LayerKind.PRUNED:
            return self.weight * self.input_mask
        if kind == LayerKind.UNSTRUCTURED:
            return self.weight * self.matrix_mask
        if kind == LayerKind.LOW_RANK:
            return (self.u * self.rank_mask) @ self.v
        if kind == LayerKind.PRUNE_LOW_RANK:
            return ((self.u * self.rank_mask) @ self.v) * self.input_mask
        if kind == LayerKind.QUANTIZED:
            return self._ladder_weight()
        if kind == LayerKind.PRUNE_UNSTRUCTURED:
            return (self.weight * self.matrix_mask) * self.input_mask
        return self._ladder_weight() * self.input_mask

    def __call__(self, x: Tensor) -> Tensor:
        x = wrap(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(f"{self.name} expects inputs (batch, {self.in_dim}), got {x.shape}")
        out = x @ self.effective_weight().T
        if self.bias is not None:
            out = out + self.bias
        return out

    def weight_norm(self) -> float:
        """Frobenius norm of the base weight (of the effective weight for factored kinds)."""
        if self.weight is not None:
            return float(np.linalg.norm(self.weight.data))
        return float(np.linalg.norm(self.effective_weight().data))

    def __repr__(self) -> str:
        return f"CompressibleLayer(name={self.name!r}, kind={self.kind.value}, dims=({self.in_dim}->{self.out_dim}))"
