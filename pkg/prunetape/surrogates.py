"""
Differentiable FLOPs surrogates and exact FLOPs accounting.

All counts are multiply-accumulates (MACs): a dense d_in -> d_out matvec costs
d_in * d_out.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Union

import numpy as np

from prunetape.constants import DEAD_MASK_EPS
from prunetape.exceptions import InvalidMaskError, ShapeMismatchError, UnsupportedParameterizationError
from prunetape.layers import CompressibleLayer
from prunetape.schemas import LayerKind, QuantSurrogateVariant, SurrogateKind
from prunetape.tensor import Tensor, stack

if TYPE_CHECKING:
    from prunetape.network import CompressibleNetwork

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StaticOnesMask:
    """All-ones mask of length `dim`, never optimized (e.g. the network outputs)."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeMismatchError(f"A mask needs at least one entry, got dim={self.dim}")

    @property
    def size(self) -> int:
        return self.dim


MaskLike = Union[Tensor, StaticOnesMask]


def _check_nonnegative(alpha: Tensor) -> None:
    if alpha.size < 1:
        raise ShapeMismatchError("A mask needs at least one entry, got an empty vector")
    if (alpha.data < 0).any():
        worst = float(alpha.data.min())
        raise InvalidMaskError(f"Mask {alpha.name or '<unnamed>'} has a negative entry ({worst})")


def mask_is_dead(alpha: MaskLike) -> bool:
    if isinstance(alpha, StaticOnesMask):
        return False
    return float(np.linalg.norm(alpha.data)) < DEAD_MASK_EPS


def l1l2_count(alpha: MaskLike) -> Tensor:
    """
    sqrt(d) * sum(alpha) / ||alpha||_2, a scale-invariant stand-in for ||alpha||_0.

    A mask whose l2 norm is below DEAD_MASK_EPS counts as exactly 0 and receives
    no gradient. A uniform nonzero mask counts exactly d.
    """
    if isinstance(alpha, StaticOnesMask):
        return Tensor(float(alpha.dim))
    _check_nonnegative(alpha)
    if mask_is_dead(alpha):
        return Tensor(0.0)
    count = alpha.sum() / alpha.l2_norm() * math.sqrt(alpha.size)
    flat = alpha.data.reshape(-1)
    if (flat == flat[0]).all():
        # Uniform masks sit at a stationary point, so a constant offset leaves the gradient intact.
        count = count + (float(alpha.size) - float(count.data))
    return count


def l1_count(alpha: MaskLike) -> Tensor:
    """||alpha||_1 for a nonnegative mask."""
    if isinstance(alpha, StaticOnesMask):
        return Tensor(float(alpha.dim))
    _check_nonnegative(alpha)
    return alpha.sum()


def _check_next(layer: CompressibleLayer, next_mask: MaskLike) -> None:
    if next_mask.size != layer.out_dim:
        raise ShapeMismatchError(
            f"Next mask of {layer.name} has {next_mask.size} entries, layer has {layer.out_dim} outputs"
        )


def flops_surrogate(
    layer: CompressibleLayer,
    next_mask: MaskLike,
    variant: QuantSurrogateVariant = QuantSurrogateVariant.VERBATIM,
) -> Tensor:
    """ℓ1/ℓ2 MAC surrogate of one layer given the mask on its outputs."""
    _check_next(layer, next_mask)
    kind = layer.kind
    if kind == LayerKind.DENSE:
        return layer.in_dim * l1l2_count(next_mask)
    if kind == LayerKind.PRUNED:
        return l1l2_count(layer.input_mask) * l1l2_count(next_mask)
    if kind == LayerKind.UNSTRUCTURED:
        return l1l2_count(layer.matrix_mask.reshape(-1))
    if kind == LayerKind.LOW_RANK:
        return (layer.in_dim + layer.out_dim) * l1l2_count(layer.rank_mask)
    if kind == LayerKind.PRUNE_LOW_RANK:
        return (l1l2_count(layer.input_mask) + l1l2_count(next_mask)) * l1l2_count(layer.rank_mask)
    if kind == LayerKind.PRUNE_UNSTRUCTURED:
        _check_nonnegative(layer.input_mask)
        return l1l2_count((layer.matrix_mask * layer.input_mask).reshape(-1))
    if kind == LayerKind.QUANTIZED:
        return quant_flops_surrogate(layer, variant)
    return quant_bit_factor(layer, variant) * l1l2_count(layer.input_mask) * l1l2_count(next_mask)


def bit_cost_vector(layer: CompressibleLayer) -> Tensor:
    """
    Entry k is b_k times the probability-like weight that the ladder stops at
    rung k: (prod of rung masks up to k) * (1 - mask of rung k+1).
    """
    if not layer.kind.is_quantized:
        raise UnsupportedParameterizationError(f"{layer.name} ({layer.kind.value}) has no bit ladder")
    layer.check_bit_masks()
    ladder = layer.bit_ladder
    prefix = layer.rung_mask(0)
    entries: List[Tensor] = []
    for k, bits in enumerate(ladder):
        if k + 1 < len(ladder):
            nxt = layer.rung_mask(k + 1)
            entries.append(bits * (prefix * (1.0 - nxt)))
            prefix = prefix * nxt
        else:
            entries.append(bits * prefix)
    return stack(entries)


def quant_bit_factor(layer: CompressibleLayer, variant: QuantSurrogateVariant) -> Tensor:
    v = bit_cost_vector(layer)
    if variant == QuantSurrogateVariant.NUMERATOR:
        return v.sum()
    if float(np.linalg.norm(v.data)) < DEAD_MASK_EPS:
        return Tensor(0.0)
    return v.sum() / v.l2_norm()


def quant_flops_surrogate(
    layer: CompressibleLayer,
    variant: QuantSurrogateVariant = QuantSurrogateVariant.VERBATIM,
) -> Tensor:
    """
    Bit-weighted MAC surrogate of a quantized layer.

    VERBATIM returns (sum v / ||v||_2) * d_in * d_out, which is 1 * d_in * d_out at
    every 0/1 corner. NUMERATOR returns (sum v) * d_in * d_out, which equals
    b * d_in * d_out for the selected width b at the corners.
    """
    return quant_bit_factor(layer, variant) * (layer.in_dim * layer.out_dim)


def l1_surrogate(layer: CompressibleLayer, next_mask: MaskLike) -> Tensor:
    """||alpha_i||_1 * ||alpha_{i+1}||_1, the scale-sensitive baseline."""
    _check_next(layer, next_mask)
    if layer.kind == LayerKind.PRUNED:
        return l1_count(layer.input_mask) * l1_count(next_mask)
    if layer.kind == LayerKind.DENSE:
        return layer.in_dim * l1_count(next_mask)
    raise UnsupportedParameterizationError(
        f"The l1 surrogate is only defined for pruned layers, {layer.name} is {layer.kind.value}"
    )


def network_flops_surrogate(
    network: "CompressibleNetwork",
    surrogate: SurrogateKind = SurrogateKind.L1L2,
    variant: QuantSurrogateVariant = QuantSurrogateVariant.VERBATIM,
) -> Tensor:
    """Sum of the per-layer surrogates, each layer paired with the mask on its outputs."""
    total: Tensor = Tensor(0.0)
    for i, layer in enumerate(network.layers):
        next_mask = network.next_mask(i)
        if surrogate == SurrogateKind.L1:
            term = l1_surrogate(layer, next_mask)
        else:
            term = flops_surrogate(layer, next_mask, variant)
        total = total + term
    return total


def dead_masks(network: "CompressibleNetwork") -> List[str]:
    """Names of masks whose l2 norm fell below DEAD_MASK_EPS."""
    return [p.name for p in network.masks() if p.size and mask_is_dead(p)]


def layer_exact_flops(network: "CompressibleNetwork", index: int) -> int:
    """ℓ0 MAC count of one layer over the structure that survives in the network."""
    layer = network.layers[index]
    live_in = network.live_inputs(index)
    live_out = network.live_outputs(index)
    n_in, n_out = len(live_in), len(live_out)
    kind = layer.kind
    if kind in (LayerKind.DENSE, LayerKind.PRUNED):
        return n_in * n_out
    if kind.has_matrix_mask:
        return int(np.count_nonzero(layer.matrix_mask.data[np.ix_(live_out, live_in)]))
    if kind.is_low_rank:
        return (n_in + n_out) * int(np.count_nonzero(layer.rank_mask.data))
    return layer.selected_bits() * n_in * n_out


def exact_flops(network: "CompressibleNetwork") -> int:
    return int(sum(layer_exact_flops(network, i) for i in range(len(network.layers))))
