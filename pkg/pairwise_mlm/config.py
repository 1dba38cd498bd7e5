import importlib
import inspect
import os
from pathlib import Path
from types import ModuleType
from typing import Dict, List

from pairwise_mlm.exceptions import PairwiseMlmImportError

# Defaults for the PMLM_* environment variables read by PairwiseMlmConfig.

# Base directory used by the CLI to resolve relative data paths
PMLM_DATA_DIR = "."

# Directory where jinja2 templates for summary tables are stored by default
PMLM_TEMPLATES_DIR = str(Path(__file__).parent / "templates")

# The python dotted path to the module that provides loader functions
PMLM_LOADERS_MODULE = "pairwise_mlm.loaders"

# The python dotted path to the module that provides dumper functions
PMLM_DUMPERS_MODULE = "pairwise_mlm.dumpers"

# Log level applied by the CLI
PMLM_LOG_LEVEL = "INFO"

# Worker threads used for batch preparation. 1 keeps runs bitwise reproducible.
PMLM_THREADS = "1"

# Package version, embedded in every emitted file
__version__ = "0.1.0"

# Prefix of environment variables that override run configuration keys, e.g.
# PMLM__TRAIN__TOTAL_STEPS=500 or PMLM__MODEL__LAMBDA=0
OVERRIDE_PREFIX = "PMLM__"


class PairwiseMlmConfig:
    """Package settings. Every property re-reads the environment."""

    @property
    def data_dir(self) -> Path:
        return Path(os.environ.get("PMLM_DATA_DIR", PMLM_DATA_DIR))

    @property
    def templates_dir(self) -> str:
        return os.environ.get("PMLM_TEMPLATES_DIR", PMLM_TEMPLATES_DIR)

    @property
    def log_level(self) -> str:
        return os.environ.get("PMLM_LOG_LEVEL", PMLM_LOG_LEVEL).upper()

    @property
    def threads(self) -> int:
        return int(os.environ.get("PMLM_THREADS", PMLM_THREADS))

    @property
    def loaders_module_path(self) -> str:
        return os.environ.get("PMLM_LOADERS_MODULE", PMLM_LOADERS_MODULE)

    @property
    def loaders_module(self) -> ModuleType:
        try:
            loaders_module = importlib.import_module(self.loaders_module_path)
        except ImportError as err:
            raise PairwiseMlmImportError(err)

        return loaders_module

    @property
    def dumpers_module_path(self) -> str:
        return os.environ.get("PMLM_DUMPERS_MODULE", PMLM_DUMPERS_MODULE)

    @property
    def dumpers_module(self) -> ModuleType:
        try:
            dumpers_module = importlib.import_module(self.dumpers_module_path)
        except ImportError as err:
            raise PairwiseMlmImportError(err)

        return dumpers_module

    @property
    def supported_formats(self) -> List[str]:
        """Extensions with a `{ext}_loader` defined in the loaders module. FASTA is handled by seqio."""
        module = self.loaders_module
        return [
            name[: -len("_loader")]
            for name, obj in inspect.getmembers(module, inspect.isfunction)
            if name.endswith("_loader") and obj.__module__ == module.__name__
        ]

    @property
    def env_overrides(self) -> Dict[str, Dict[str, str]]:
        """
        Collects run-config overrides from the environment.

        PMLM__TRAIN__TOTAL_STEPS=500 becomes {"train": {"total_steps": "500"}}.
        Values are left as strings; pydantic coerces them when the run config
        is validated.
        """
        overrides: Dict[str, Dict[str, str]] = {}

        for name, value in os.environ.items():
            if not name.startswith(OVERRIDE_PREFIX):
                continue
            section, _, key = name[len(OVERRIDE_PREFIX) :].partition("__")
            if not key:
                continue
            overrides.setdefault(section.lower(), {})[key.lower()] = value

        return overrides


GLOBAL_CONFIGS = None


def get_config() -> PairwiseMlmConfig:
    global GLOBAL_CONFIGS

    if GLOBAL_CONFIGS is None:
        GLOBAL_CONFIGS = PairwiseMlmConfig()

    return GLOBAL_CONFIGS
