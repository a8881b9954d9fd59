__version__ = "0.4.0"

import logging
from pathlib import Path
from typing import Union

from prunetape.catalog import RunCatalog, discover
from prunetape.experiments import run_experiment, run_single
from prunetape.extraction import ExtractedModel, extract_compressed, load_extracted, save_extracted
from prunetape.latency import LatencyTable, build_table, interpolate, latency_reg, load_table, save_table
from prunetape.network import CompressibleNetwork
from prunetape.surrogates import exact_flops, flops_surrogate, l1_count, l1l2_count, network_flops_surrogate
from prunetape.trainer import anneal_lambda, distill_loss, train

logging.getLogger(__name__).addHandler(logging.NullHandler())


def exists(directory: Union[str, Path]) -> bool:
    """True if `directory` holds a run catalog."""
    return discover(directory) is not None


def get_catalog(directory: Union[str, Path]) -> RunCatalog:
    """
    Open the run catalog recorded under `directory`.

    Raises:
        CatalogNotFoundError: If no run was ever recorded there.
    """
    return RunCatalog.from_directory(directory)


__all__ = [
    "CompressibleNetwork",
    "ExtractedModel",
    "LatencyTable",
    "RunCatalog",
    "anneal_lambda",
    "build_table",
    "discover",
    "distill_loss",
    "exact_flops",
    "exists",
    "extract_compressed",
    "flops_surrogate",
    "get_catalog",
    "interpolate",
    "l1_count",
    "l1l2_count",
    "latency_reg",
    "load_extracted",
    "load_table",
    "network_flops_surrogate",
    "run_experiment",
    "run_single",
    "save_extracted",
    "save_table",
    "train",
]
