import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..config import ExperimentConfig, FedConfig
from ..errors import ConfigError, TwinError
from ..services.federation import ESTIMATE_STREAM, FederationService, Objective, StepSizeCheck
from ..services.numerics import RngStream

logger = logging.getLogger(__name__)


def resolve_step_size(fed: FedConfig, objectives: Sequence[Objective], params: np.ndarray,
                      seed: int) -> Optional[Dict[str, Any]]:
    """
    Check ``fed.local_lr`` against the step-size bound and apply the policy

    G and L come from the config when both are set, otherwise from
    ``estimate_constants``. Returns None when there are no local steps.
    Under ``warn`` a violation only logs, except for gated aggregation with
    ``local_lr`` above ``step_size_fatal_factor`` times the bound.

    Raises:
        ConfigError: the bound is violated under ``enforce``, or grossly
            violated by a gated run
    """
    if fed.local_steps == 0:
        return None
    if fed.G is not None and fed.L is not None:
        G, L, source = fed.G, fed.L, "config"
    else:
        estimate = FederationService.estimate_constants(
            objectives, params, fed.estimate_samples, RngStream(seed).fork(ESTIMATE_STREAM),
            radius=fed.estimate_radius,
        )
        G = fed.G if fed.G is not None else estimate.G
        L = fed.L if fed.L is not None else estimate.L
        source = "estimated"
    if not (G > 0 and L > 0):
        logger.warning(f"Step-size bound skipped: constants G={G}, L={L} are not positive")
        return {"source": source, "G": G, "L": L, "skipped": True}
    check = FederationService.check_step_size(G, L, fed.mu, fed.local_steps, fed.global_lr, fed.local_lr)
    summary = {"source": source, "G": G, "L": L, **check.to_dict()}
    if not check.passed:
        message = (f"local_lr {fed.local_lr:g} exceeds the step-size bound {check.bound:.6g} "
                   f"(G={G:.4g}, L={L:.4g}, mu={fed.mu:g}, local_steps={fed.local_steps})")
        if fed.step_size_policy == "enforce":
            raise ConfigError(message)
        ratio = fed.local_lr / check.bound
        if fed.aggregation == "gated" and ratio > fed.step_size_fatal_factor:
            raise ConfigError(f"{message}; {ratio:.3g}x over, gated runs allow at most "
                              f"{fed.step_size_fatal_factor:g}x")
        logger.warning(message)
    return summary


def check_bound(G: float, L: float, mu: float, beta: int, eta: float,
                eta_l: Optional[float] = None) -> Dict[str, Any]:
    try:
        check: StepSizeCheck = FederationService.check_step_size(G, L, mu, beta, eta, eta_l)
        logger.info(f"Step-size bound {check.bound:.6g} (eta_l={eta_l}, passed={check.passed})")
        return {"status": "success", "exit_code": 0, **check.to_dict()}
    except TwinError as e:
        logger.error(f"Bound check failed: {e}")
        return {"status": "error", "exit_code": e.exit_code, "message": str(e)}


def bound_arguments(config: Optional[ExperimentConfig], overrides: Dict[str, Any]) -> List[Any]:
    """(G, L, mu, beta, eta, eta_l) from explicit flags, falling back to the config"""
    fed = config.fed if config is not None else FedConfig()
    values = {
        "G": fed.G, "L": fed.L, "mu": fed.mu, "beta": fed.local_steps,
        "eta": fed.global_lr, "eta_l": fed.local_lr if config is not None else None,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return [values[k] for k in ("G", "L", "mu", "beta", "eta", "eta_l")]
