"""Runtime settings.

Defaults come from the environment (optionally a `.env` file), a `key=value`
config file may override them, and command-line flags override both.
"""

from dotenv import load_dotenv, dotenv_values
from typing import Any, Dict, Optional
import logging
import os

import numba

logger = logging.getLogger(__name__)

load_dotenv()

DEFAULT_SEED = int(os.getenv("CELLSKETCH_SEED", "42"))
DEFAULT_ROWS = int(os.getenv("CELLSKETCH_ROWS", "100"))
DEFAULT_RANGE = int(os.getenv("CELLSKETCH_RANGE", "10000"))
DEFAULT_THREADS = int(os.getenv("CELLSKETCH_THREADS", str(numba.config.NUMBA_NUM_THREADS)))
LOG_LEVEL = os.getenv("CELLSKETCH_LOG_LEVEL", "INFO").upper()

# config-file keys that map onto differently named RunConfig fields
KEY_ALIASES = {
    "rows": "n_rows",
    "range": "n_buckets",
    "fraction": "sample_fraction",
    "k": "sample_k",
    "layers": "n_layers",
    "heads": "n_heads",
    "expr": "expr_path",
    "labels": "labels_path",
    "symbols": "symbols_path",
    "ground_truth": "ground_truth_path",
    "sketch": "sketch_path",
    "subset": "subset_path",
    "plan": "plan_path",
    "plan_out": "plan_out_path",
    "ranked": "ranked_path",
    "out": "out_path",
    "weights": "weights_path",
}

FLAG_VALUES = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}
BOOLEAN_KEYS = {"normalize", "uniform", "weighted_estimator", "sampling"}


def environment_defaults() -> Dict[str, Any]:
    return {
        "seed": DEFAULT_SEED,
        "n_rows": DEFAULT_ROWS,
        "n_buckets": DEFAULT_RANGE,
        "threads": DEFAULT_THREADS,
    }


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Parse a `key=value` file into RunConfig field names.

    Values stay strings; pydantic coerces them when the RunConfig is built.
    """
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    settings = {}
    for key, value in dotenv_values(path).items():
        name = key.strip().lower().replace("-", "_")
        name = KEY_ALIASES.get(name, name)
        if value is None:
            continue
        settings[name] = FLAG_VALUES.get(value.strip().lower(), value) if name in BOOLEAN_KEYS else value
    logger.info(f"Loaded {len(settings)} settings from {path}")
    return settings


def resolve(flags: Dict[str, Any], config_path: Optional[str] = None) -> Dict[str, Any]:
    """Merge settings: flags > config file > environment."""
    merged = environment_defaults()
    merged.update(read_config_file(config_path))
    merged.update({key: value for key, value in flags.items() if value is not None})
    return merged
