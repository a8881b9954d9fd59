import copy
import hashlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from prunetape.constants import BIT_MASK_THRESHOLD
from prunetape.exceptions import ShapeMismatchError
from prunetape.functional import NormStats
from prunetape.layers import CompressibleLayer
from prunetape.schemas import ArchitectureSpec, LayerKind, NormKind
from prunetape.surrogates import MaskLike, StaticOnesMask
from prunetape.tensor import Parameter, Tensor, wrap

logger = logging.getLogger(__name__)

WeightList = Sequence[Tuple[np.ndarray, Optional[np.ndarray]]]


def he_init(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    return rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)


class CompressibleNetwork:
    """
    Feed-forward stack of CompressibleLayers.

    Hidden layers are followed by the configured normalization and a ReLU; the
    last layer emits logits (or regression outputs).
    """

    def __init__(
        self,
        architecture: ArchitectureSpec,
        seed: int = 0,
        weights: Optional[WeightList] = None,
    ):
        self.architecture = architecture
        rng = np.random.default_rng(seed)
        widths = architecture.widths
        if weights is not None and len(weights) != architecture.depth:
            raise ShapeMismatchError(f"Got weights for {len(weights)} layers, architecture has {architecture.depth}")

        self.layers: List[CompressibleLayer] = []
        self.norms: List[Optional[NormStats]] = []
        for i, kind in enumerate(architecture.kinds):
            d_in, d_out = widths[i], widths[i + 1]
            if weights is None:
                w = he_init(rng, d_out, d_in)
                b = np.zeros(d_out) if architecture.bias else None
            else:
                w, b = weights[i]
                if np.shape(w) != (d_out, d_in):
                    raise ShapeMismatchError(f"layer{i} weights must be {(d_out, d_in)}, got {np.shape(w)}")
                if not architecture.bias:
                    b = None
                elif b is None:
                    b = np.zeros(d_out)
            layer = CompressibleLayer.from_weight(
                kind,
                w,
                name=f"layer{i}",
                bias=b,
                bit_ladder=architecture.bit_ladder,
                full_bit_ladder=architecture.full_bit_ladder,
                mask_init=architecture.mask_init,
                rng=rng,
            )
            self.layers.append(layer)
            hidden = i < architecture.depth - 1
            if hidden and architecture.norm != NormKind.NONE:
                self.norms.append(NormStats(d_out, architecture.norm, name=f"layer{i}.norm"))
            else:
                self.norms.append(None)

    @classmethod
    def warm_start(
        cls,
        pretrained: "CompressibleNetwork",
        architecture: ArchitectureSpec,
        seed: int = 0,
    ) -> "CompressibleNetwork":
        """
        New network of `architecture` whose weights are the effective weights of
        `pretrained`; low-rank kinds take SVD factors of them.
        """
        if tuple(architecture.widths) != tuple(pretrained.architecture.widths):
            raise ShapeMismatchError(
                f"Cannot warm-start widths {architecture.widths} from {pretrained.architecture.widths}"
            )
        weights = [
            (layer.effective_weight().data.copy(), None if layer.bias is None else layer.bias.data.copy())
            for layer in pretrained.layers
        ]
        network = cls(architecture, seed=seed, weights=weights)
        for mine, theirs in zip(network.norms, pretrained.norms):
            if mine is not None and theirs is not None:
                mine.scale.data = theirs.scale.data.copy()
                mine.shift.data = theirs.shift.data.copy()
        return network

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        h = wrap(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < self.depth - 1:
                norm = self.norms[i]
                if norm is not None:
                    h = norm(h)
                h = h.relu()
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).data

    # --- parameters ---

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for layer, norm in zip(self.layers, self.norms):
            params.extend(layer.parameters())
            if norm is not None:
                params.extend(norm.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def masks(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.is_mask]

    def weights(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.is_mask]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ShapeMismatchError(f"State is missing parameter(s): {', '.join(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeMismatchError(f"{name}: stored shape {value.shape} does not match {p.shape}")
            p.data = value.copy()

    def checksum(self) -> str:
        """SHA-256 over sorted parameter names and their float64 bytes."""
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
        return digest.hexdigest()

    def copy(self) -> "CompressibleNetwork":
        return copy.deepcopy(self)

    # --- structure ---

    def next_mask(self, index: int) -> MaskLike:
        """Mask on the outputs of layer `index`: the next layer's input mask, else all ones."""
        if index + 1 < self.depth:
            nxt = self.layers[index + 1]
            if nxt.input_mask is not None:
                return nxt.input_mask
        return StaticOnesMask(self.layers[index].out_dim)

    def live_inputs(self, index: int) -> np.ndarray:
        layer = self.layers[index]
        if layer.input_mask is None:
            return np.arange(layer.in_dim)
        return np.flatnonzero(layer.input_mask.data)

    def live_outputs(self, index: int) -> np.ndarray:
        """
        Output units of layer `index` that feed anything. Units normalized by a
        layer norm are kept, since dropping them would shift the survivors' statistics.
        """
        layer = self.layers[index]
        if index + 1 >= self.depth:
            return np.arange(layer.out_dim)
        norm = self.norms[index]
        if norm is not None and norm.kind == NormKind.LAYER:
            return np.arange(layer.out_dim)
        return self.live_inputs(index + 1)

    def project_bit_masks(self) -> None:
        """Snap every bit mask to {0, 1} at BIT_MASK_THRESHOLD."""
        for layer in self.layers:
            if layer.bit_masks is not None:
                layer.bit_masks.data = (layer.bit_masks.data >= BIT_MASK_THRESHOLD).astype(np.float64)

    def weight_norms(self) -> Dict[str, float]:
        return {layer.name: layer.weight_norm() for layer in self.layers}

    def layer_kinds(self) -> Tuple[LayerKind, ...]:
        return tuple(layer.kind for layer in self.layers)

    def __repr__(self) -> str:
        kinds = ", ".join(k.value for k in self.layer_kinds())
        return f"CompressibleNetwork(widths={self.architecture.widths}, kinds=[{kinds}])"
