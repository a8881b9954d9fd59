import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from prunetape.constants import FLOAT_PARAM_BITS, NORM_EPS_DEFAULT
from prunetape.exceptions import DegenerateModelError, ShapeMismatchError
from prunetape.layers import quantize_array
from prunetape.network import CompressibleNetwork
from prunetape.schemas import LayerKind, NormKind

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _array(value: Optional[List]) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64)


def _listed(value: Optional[np.ndarray]) -> Optional[List]:
    return None if value is None else value.tolist()


@dataclass(frozen=True)
class ExtractedLayer:
    """
    One layer of the compressed model with its surviving structure only.

    `input_indices` select this layer's inputs from the previous layer's
    outputs (from the raw features for the first layer). Factored layers
    store (u, beta, v); quantized layers store grid weights plus the per-input
    `input_scale` of a surviving pruning mask.
    """

    name: str
    kind: LayerKind
    input_indices: np.ndarray
    out_dim: int
    weight: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    bits: Optional[int] = None
    input_scale: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    nnz: Optional[int] = None
    norm_kind: NormKind = NormKind.NONE
    norm_scale: Optional[np.ndarray] = None
    norm_shift: Optional[np.ndarray] = None
    norm_eps: float = NORM_EPS_DEFAULT
    activation: bool = True

    @property
    def in_dim(self) -> int:
        return int(self.input_indices.size)

    @property
    def rank(self) -> int:
        return 0 if self.beta is None else int(self.beta.size)

    def dense_weight(self) -> np.ndarray:
        if self.beta is not None:
            return (self.u * self.beta) @ self.v
        if self.input_scale is not None:
            return self.weight * self.input_scale
        return self.weight

    def forward(self, h: np.ndarray) -> np.ndarray:
        h = h[:, self.input_indices]
        if self.beta is not None:
            out = ((h @ self.v.T) * self.beta) @ self.u.T
        else:
            out = h @ self.dense_weight().T
        if self.bias is not None:
            out = out + self.bias
        if self.norm_kind != NormKind.NONE:
            axis = 0 if self.norm_kind == NormKind.BATCH else 1
            mean = out.mean(axis=axis, keepdims=True)
            centered = out - mean
            var = (centered * centered).mean(axis=axis, keepdims=True)
            out = centered * (1.0 / np.sqrt(var + self.norm_eps)) * self.norm_scale + self.norm_shift
        if self.activation:
            out = np.where(out > 0, out, 0.0)
        return out

    def macs(self) -> int:
        n_in, n_out = self.in_dim, self.out_dim
        if self.nnz is not None:
            return self.nnz
        if self.beta is not None:
            return (n_in + n_out) * self.rank
        if self.bits is not None:
            return self.bits * n_in * n_out
        return n_in * n_out

    def matvec_dims(self) -> List[Tuple[int, int]]:
        """(d_in, d_out) of each matvec this layer runs."""
        if self.beta is not None:
            return [(self.in_dim, self.rank), (self.rank, self.out_dim)]
        return [(self.in_dim, self.out_dim)]

    def parameter_bits(self) -> int:
        if self.beta is not None:
            weight_bits = FLOAT_PARAM_BITS * (self.u.size + self.beta.size + self.v.size)
        elif self.nnz is not None:
            weight_bits = FLOAT_PARAM_BITS * self.nnz
        elif self.bits is not None:
            weight_bits = self.bits * self.weight.size
        else:
            weight_bits = FLOAT_PARAM_BITS * self.weight.size
        extras = [self.bias, self.input_scale, self.norm_scale, self.norm_shift]
        return int(weight_bits + FLOAT_PARAM_BITS * sum(e.size for e in extras if e is not None))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "input_indices": self.input_indices.tolist(),
            "out_dim": self.out_dim,
            "weight": _listed(self.weight),
            "u": _listed(self.u),
            "beta": _listed(self.beta),
            "v": _listed(self.v),
            "bits": self.bits,
            "input_scale": _listed(self.input_scale),
            "bias": _listed(self.bias),
            "nnz": self.nnz,
            "norm": {
                "kind": self.norm_kind.value,
                "scale": _listed(self.norm_scale),
                "shift": _listed(self.norm_shift),
                "eps": self.norm_eps,
            },
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtractedLayer":
        norm = data.get("norm") or {}
        return cls(
            name=data["name"],
            kind=LayerKind(data["kind"]),
            input_indices=np.asarray(data["input_indices"], dtype=np.int64),
            out_dim=int(data["out_dim"]),
            weight=_array(data.get("weight")),
            u=_array(data.get("u")),
            beta=_array(data.get("beta")),
            v=_array(data.get("v")),
            bits=data.get("bits"),
            input_scale=_array(data.get("input_scale")),
            bias=_array(data.get("bias")),
            nnz=data.get("nnz"),
            norm_kind=NormKind(norm.get("kind", NormKind.NONE.value)),
            norm_scale=_array(norm.get("scale")),
            norm_shift=_array(norm.get("shift")),
            norm_eps=float(norm.get("eps", NORM_EPS_DEFAULT)),
            activation=bool(data.get("activation", True)),
        )


@dataclass(frozen=True)
class ExtractedModel:
    input_dim: int
    layers: Tuple[ExtractedLayer, ...]
    source_checksum: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"Extracted model expects (batch, {self.input_dim}) inputs, got {h.shape}")
        for layer in self.layers:
            h = layer.forward(h)
        return h

    __call__ = forward

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.layers[0].in_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def exact_macs(self) -> int:
        return int(sum(layer.macs() for layer in self.layers))

    @property
    def parameter_bits(self) -> int:
        return int(sum(layer.parameter_bits() for layer in self.layers))

    @property
    def bit_widths(self) -> Dict[str, int]:
        return {layer.name: layer.bits for layer in self.layers if layer.bits is not None}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_VERSION,
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "exact_macs": self.exact_macs,
            "parameter_bits": self.parameter_bits,
            "source_checksum": self.source_checksum,
            "metadata": self.metadata,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtractedModel":
        if data.get("format") != FORMAT_VERSION:
            raise ValueError(f"Unsupported extracted-model format {data.get('format')!r}")
        return cls(
            input_dim=int(data["input_dim"]),
            layers=tuple(ExtractedLayer.from_dict(d) for d in data["layers"]),
            source_checksum=data.get("source_checksum", ""),
            metadata=dict(data.get("metadata") or {}),
        )


def _degenerate(layer_name: str, what: str) -> DegenerateModelError:
    return DegenerateModelError(f"{layer_name}: {what}; the compressed model has no path through this layer")


def extract_compressed(network: CompressibleNetwork, metadata: Optional[Dict[str, Any]] = None) -> ExtractedModel:
    """
    Materialize the surviving structure of a trained network.

    Inputs with a zero mask entry are dropped together with the previous
    layer's matching outputs; zero ranks are truncated; bit masks are read
    through their 0/1 projection. Masks are folded into the stored weights
    except for quantized layers, whose weights stay on their grid.
    """
    layers: List[ExtractedLayer] = []
    prev_out: Optional[np.ndarray] = None
    last = network.depth - 1
    for i, layer in enumerate(network.layers):
        live_in = network.live_inputs(i)
        live_out = network.live_outputs(i)
        if live_in.size == 0:
            raise _degenerate(layer.name, "every input mask entry is zero")
        if live_out.size == 0:
            raise _degenerate(layer.name, "every output feeds a zero mask entry")

        input_indices = live_in if prev_out is None else np.searchsorted(prev_out, live_in)
        rows, cols = np.ix_(live_out, live_in)
        fields: Dict[str, Any] = {}
        kind = layer.kind

        if kind.is_low_rank:
            ranks = np.flatnonzero(layer.rank_mask.data)
            if ranks.size == 0:
                raise _degenerate(layer.name, "every rank mask entry is zero")
            v = layer.v.data[np.ix_(ranks, live_in)]
            if layer.input_mask is not None:
                v = v * layer.input_mask.data[live_in]
            fields.update(u=layer.u.data[np.ix_(live_out, ranks)].copy(), beta=layer.rank_mask.data[ranks].copy(), v=v)
        elif kind.is_quantized:
            bits = layer.selected_bits()
            if bits == 0:
                raise _degenerate(layer.name, "the lowest bit rung is switched off")
            grid = quantize_array(layer.weight.data, *layer.ranges[bits], bits)
            fields.update(weight=grid[rows, cols], bits=bits)
            if layer.input_mask is not None:
                fields["input_scale"] = layer.input_mask.data[live_in].copy()
        else:
            weight = layer.effective_weight().data[rows, cols]
            fields["weight"] = weight
            if kind.has_matrix_mask:
                nnz = int(np.count_nonzero(layer.matrix_mask.data[rows, cols]))
                if nnz == 0:
                    raise _degenerate(layer.name, "every matrix mask entry is zero")
                fields["nnz"] = nnz

        norm = network.norms[i]
        if norm is not None:
            fields.update(
                norm_kind=norm.kind,
                norm_scale=norm.scale.data[live_out].copy(),
                norm_shift=norm.shift.data[live_out].copy(),
                norm_eps=norm.eps,
            )
        layers.append(
            ExtractedLayer(
                name=layer.name,
                kind=kind,
                input_indices=np.asarray(input_indices, dtype=np.int64),
                out_dim=int(live_out.size),
                bias=None if layer.bias is None else layer.bias.data[live_out].copy(),
                activation=i < last,
                **fields,
            )
        )
        prev_out = live_out

    model = ExtractedModel(
        input_dim=network.in_dim,
        layers=tuple(layers),
        source_checksum=network.checksum(),
        metadata=dict(metadata or {}),
    )
    logger.info(f"Extracted widths {model.widths}, {model.exact_macs} MACs, {model.parameter_bits} parameter bits")
    return model


def save_extracted(model: ExtractedModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")
    return path


def load_extracted(path: Union[str, Path]) -> ExtractedModel:
    return ExtractedModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
