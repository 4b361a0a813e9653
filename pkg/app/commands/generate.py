import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from ..config import MANIFEST_KIND, ExperimentConfig, effective_config_dict
from ..errors import ReportIOError, TwinError
from ..records.audit import RunAuditLogger
from ..services.scenario import Example, Modality, MultiModalDataset, ScenarioService

logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"


@dataclass
class PreparedData:
    """Standardized training and held-out parts of one dataset"""

    raw: MultiModalDataset
    train: MultiModalDataset
    held_out: MultiModalDataset
    source: str

    @property
    def modalities(self) -> List[Modality]:
        return self.train.modalities

    def train_examples(self, window: int, modalities=None) -> List[Example]:
        return ScenarioService.window(self.train, window, modalities)

    def held_out_examples(self, window: int, modalities=None) -> List[Example]:
        return ScenarioService.window(self.held_out, window, modalities)


def load_or_generate(config: ExperimentConfig) -> MultiModalDataset:
    if config.dataset_dir:
        logger.info(f"Loading dataset from {config.dataset_dir}")
        return ScenarioService.load_dataset_dir(config.dataset_dir)
    return ScenarioService.generate_world(config.world)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load or generate, time-split each area, standardize on the training part"""
    raw = load_or_generate(config)
    train, held_out = ScenarioService.split_dataset(raw, config.world.train_fraction)
    scalers = ScenarioService.fit_standardization(train)
    return PreparedData(
        raw=raw,
        train=ScenarioService.standardize(train, scalers),
        held_out=ScenarioService.standardize(held_out, scalers),
        source=config.dataset_dir or "generated",
    )


def write_manifest(out_dir: str, config: ExperimentConfig, extra: Optional[Dict[str, Any]] = None) -> str:
    """
    ``manifest.json``: the effective config (replayable with ``--config``)
    plus run facts
    """
    manifest = {
        "kind": MANIFEST_KIND,
        "seed": config.world.seed,
        "seeds": list(config.seeds),
        "config": effective_config_dict(config),
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise ReportIOError(f"cannot write manifest: {e}", path=path) from e
    return path


def generate_dataset(config: ExperimentConfig, out_dir: str) -> Dict[str, Any]:
    """
    Write the synthetic dataset CSVs under ``<out>/dataset`` and a manifest

    Returns:
        Dictionary with status, file list and exit code
    """
    audit = RunAuditLogger(out_dir)
    try:
        dataset = ScenarioService.generate_world(config.world)
        paths = ScenarioService.export_csv(dataset, os.path.join(out_dir, DATASET_DIR))
        manifest = write_manifest(out_dir, config, {"dataset_files": [os.path.basename(p) for p in paths]})
        audit.log_event("dataset_generated", {
            "areas": len(dataset.areas),
            "steps_per_area": config.world.steps_per_area,
            "seed": config.world.seed,
            "raw_bytes": dataset.raw_bytes(),
        })
        return {
            "status": "success",
            "exit_code": 0,
            "files": paths,
            "manifest": manifest,
        }
    except TwinError as e:
        logger.error(f"Dataset generation failed: {e}", exc_info=True)
        return {"status": "error", "exit_code": e.exit_code, "message": str(e)}
