import logging
import os
from typing import Any, Dict

from ..config import ExperimentConfig
from ..errors import ReportIOError, TwinError
from ..records.audit import RunAuditLogger
from ..services.federation import FederationService
from ..services.metrics import FLOAT_FORMAT, costs_frame
from ..services.numerics import RngStream
from ..services.twin import TwinService
from .generate import load_or_generate, write_manifest

logger = logging.getLogger(__name__)


def compute_costs(config: ExperimentConfig, out_dir: str) -> Dict[str, Any]:
    """
    Closed-form federated, centralized and direct ledgers for every fusor in
    the sweep, written to ``costs.csv``
    """
    audit = RunAuditLogger(out_dir)
    try:
        dataset = load_or_generate(config)
        modalities = dataset.modalities
        window = config.world.window
        ledgers = {}
        for fusor in config.twin.fusor_sweep():
            rng = RngStream(config.world.seed)
            twin = TwinService.build_twin(modalities, config.twin.latent_dim, fusor, config.twin, window, rng)
            direct = {
                m.value: TwinService.build_twin([m], config.twin.latent_dim, fusor, config.twin,
                                                window, rng).param_count
                for m in modalities
            }
            ledgers[fusor.value] = FederationService.cost_compare(
                config.fed, dataset, twin.param_count, len(modalities), direct
            )
            fed, central = ledgers[fusor.value]["federated"], ledgers[fusor.value]["centralized"]
            logger.info(f"{fusor.value}: |theta|={twin.param_count}, federated {fed.total_bytes} B, "
                        f"centralized {central.total_bytes} B")
        path = os.path.join(out_dir, "costs.csv")
        try:
            os.makedirs(out_dir, exist_ok=True)
            costs_frame(ledgers).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            raise ReportIOError(f"cannot write costs: {e}", path=path) from e
        manifest = write_manifest(out_dir, config)
        audit.log_event("costs_computed", {
            run: {mode: ledger.total_bytes for mode, ledger in pair.items()}
            for run, pair in ledgers.items()
        })
        return {
            "status": "success",
            "exit_code": 0,
            "files": {"costs": path, "manifest": manifest},
            "ledgers": {run: {mode: l.to_row() for mode, l in pair.items()} for run, pair in ledgers.items()},
        }
    except TwinError as e:
        logger.error(f"Cost comparison failed: {e}", exc_info=True)
        return {"status": "error", "exit_code": e.exit_code, "message": str(e)}
