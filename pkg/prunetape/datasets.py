import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from prunetape.exceptions import DatasetFormatError
from prunetape.schemas import DatasetHandle, DatasetKind, DatasetSpec, TaskKind

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: Path, expected_magic: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Big-endian IDX of unsigned bytes: magic, one uint32 per dim, then the payload."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: byte offset 0: file too short for the magic number ({len(raw)} bytes)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: byte offset 0: expected magic 0x{expected_magic:08x}, got 0x{magic:08x}")

    n_dims = magic & 0xFF
    header_end = 4 + 4 * n_dims
    if len(raw) < header_end:
        raise DatasetFormatError(
            f"{path}: byte offset {len(raw)}: header truncated, {n_dims} dimension(s) need {header_end} bytes"
        )
    dims = struct.unpack_from(f">{n_dims}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_end
    if payload != expected:
        raise DatasetFormatError(
            f"{path}: byte offset {header_end}: payload has {payload} bytes, dims {dims} need {expected}"
        )
    return tuple(int(d) for d in dims), np.frombuffer(raw, dtype=np.uint8, offset=header_end)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> DatasetHandle:
    """Images flattened to rows and scaled to [0, 1]; labels as int64 class indices."""
    image_dims, pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    label_dims, labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if image_dims[0] != label_dims[0]:
        raise DatasetFormatError(
            f"{labels_path}: byte offset 4: {label_dims[0]} labels for {image_dims[0]} images in {images_path}"
        )
    n = image_dims[0]
    features = pixels.reshape(n, -1).astype(np.float64) / 255.0
    return DatasetHandle(
        kind=DatasetKind.IDX_IMAGES,
        task=TaskKind.CLASSIFICATION,
        features=features,
        targets=labels.astype(np.int64),
        source=f"idx:{Path(images_path).name}",
        normalized=True,
    )


def gen_sparse_regression(n: int, d: int, k: int, noise: float, seed: int) -> DatasetHandle:
    """
    y = X w* + noise * e with standard normal X and e, and w* holding k entries
    of magnitude 1 (random signs) on a random support.
    """
    if not 0 <= k <= d:
        raise ValueError(f"k must satisfy 0 <= k <= d, got k={k}, d={d}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, d))
    support = np.sort(rng.choice(d, size=k, replace=False))
    coefficients = np.zeros(d)
    coefficients[support] = rng.choice([-1.0, 1.0], size=k)
    targets = features @ coefficients
    if noise > 0:
        targets = targets + noise * rng.standard_normal(n)
    return DatasetHandle(
        kind=DatasetKind.SYNTHETIC_REGRESSION,
        task=TaskKind.REGRESSION,
        features=features,
        targets=targets,
        source=f"synthetic-regression(n={n}, d={d}, k={k}, noise={noise}, seed={seed})",
        support=tuple(int(j) for j in support),
        coefficients=coefficients,
        noise=noise,
    )


def gen_gaussian_clusters(n: int, d: int, k: int, separation: float, seed: int) -> DatasetHandle:
    """
    Two classes; the k informative features have class means +-separation/2,
    the other d - k features are pure noise.
    """
    if not 1 <= k <= d:
        raise ValueError(f"Need 1 <= k <= d informative features, got k={k}, d={d}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    support = np.sort(rng.choice(d, size=k, replace=False))
    features = rng.standard_normal((n, d))
    features[:, support] += (separation / 2.0) * (2.0 * labels - 1.0)[:, None]
    return DatasetHandle(
        kind=DatasetKind.SYNTHETIC_CLUSTERS,
        task=TaskKind.CLASSIFICATION,
        features=features,
        targets=labels.astype(np.int64),
        source=f"synthetic-clusters(n={n}, d={d}, k={k}, separation={separation}, seed={seed})",
        support=tuple(int(j) for j in support),
    )


def load_dataset(spec: DatasetSpec) -> DatasetHandle:
    """
    Resolve a DatasetSpec. Missing IDX files fall back to the Gaussian-cluster
    task; the handle's `source` says which data was used.
    """
    if spec.kind == DatasetKind.IDX_IMAGES:
        images, labels = Path(spec.images_path), Path(spec.labels_path)
        if images.is_file() and labels.is_file():
            return load_idx(images, labels)
        logger.warning(f"IDX files {images} / {labels} not found; using synthetic Gaussian clusters instead")
        return gen_gaussian_clusters(spec.n, spec.d, max(spec.k, 1), spec.separation, spec.seed)
    if spec.kind == DatasetKind.SYNTHETIC_REGRESSION:
        return gen_sparse_regression(spec.n, spec.d, spec.k, spec.noise, spec.seed)
    return gen_gaussian_clusters(spec.n, spec.d, max(spec.k, 1), spec.separation, spec.seed)
