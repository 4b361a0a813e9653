import logging
import os
from typing import Any, Dict, List, Optional, Sequence

from ..config import ExperimentConfig
from ..errors import ConfigError, DivergenceError, TwinError
from ..records.audit import RunAuditLogger
from ..records.models import CostLedger, NmseRow, RoundRecord
from ..services.federation import FederationService, TwinObjective
from ..services.fusion import FusorKind
from ..services.metrics import (
    emit_report,
    evaluate_op,
    inertial_generation_nmse,
    positioning_nmse,
    trajectory_prediction_nmse,
)
from ..services.numerics import RngStream
from ..services.scenario import Modality
from ..services.twin import TwinModel, TwinOp, TwinService, map_op
from .bound import resolve_step_size
from .generate import PreparedData, prepare_data, write_manifest

logger = logging.getLogger(__name__)

TEMPLATE_STREAM = 10
TRANSFORM_STREAM = 20


def run_label(fusor: FusorKind, seed: int) -> str:
    return f"{fusor.value}_seed{seed}"


def op_slug(op: TwinOp) -> str:
    return "".join(m.value for m in op.sources) + "_to_" + "".join(m.value for m in op.targets)


def _map_areas(config: ExperimentConfig, data: PreparedData, fusor: FusorKind, seed: int,
               threads: int, audit: RunAuditLogger):
    """Build the template twin and run the distributed mapping loop for one (fusor, seed)"""
    window = config.world.window
    modalities = data.modalities
    op = map_op(modalities)
    template = TwinService.build_twin(modalities, config.twin.latent_dim, fusor, config.twin, window,
                                      RngStream(seed).fork(TEMPLATE_STREAM))
    objectives = FederationService.area_objectives(data.train, template, op, window, config.fed.batch_size)
    monitor = TwinObjective(template, data.held_out_examples(window, modalities), op)
    theta0 = template.flatten()
    step_size = resolve_step_size(config.fed, objectives, theta0, seed)
    result = FederationService.run_mapping(config.fed, objectives, theta0, seed, monitor=monitor,
                                           threads=threads, on_round=audit.log_round)
    return template.with_params(result.params), result, step_size


def _downstream_rows(twin: TwinModel, examples, op: TwinOp, fusor: FusorKind, mode: str,
                     seed: int, window: int, scalers) -> List[Dict[str, Any]]:
    """Trajectory (V), positioning (W) and inertial (S) checks on real and twin-generated windows"""
    if twin.reconstruction_space != "raw":
        return []
    tasks = {
        Modality.V: ("trajectory", lambda ws, real: trajectory_prediction_nmse(ws, truth_windows=real)),
        Modality.W: ("positioning", lambda ws, real: positioning_nmse(ws, truth_windows=real,
                                                                       scaler=scalers.get(Modality.W))),
        Modality.S: ("inertial", lambda ws, real: inertial_generation_nmse(ws, truth_windows=real)),
    }
    outputs = [TwinService.reconstruct(twin, e, op) for e in examples]
    rows = []
    for m in op.targets:
        if m == Modality.V and window < 3:
            continue
        task, score = tasks[m]
        real = [e.windows[m] for e in examples]
        generated = [out[m] for out in outputs]
        for source, windows in (("real", real), ("twin", generated)):
            result = score(windows, real)
            rows.append({"fusor": fusor.value, "op": op.notation(), "mode": mode, "seed": seed, "task": task,
                         "source": source, "nmse": result.value, "samples": result.samples})
    return rows


def _checkpoint(config: ExperimentConfig, out_dir: str, label: str, name: str, twin: TwinModel) -> None:
    if config.checkpoints:
        TwinService.save_twin(twin, os.path.join(out_dir, "checkpoints", label, name))


def run_experiment(config: ExperimentConfig, out_dir: str, threads: Optional[int] = None,
                   ops: Optional[Sequence[TwinOp]] = None) -> Dict[str, Any]:
    """
    For every (fusor, seed): map the areas, build each op's twin from the
    mapped twin, score it on held-out windows; then write the report

    Returns:
        Dictionary with status, output files and exit code. A divergence
        returns exit code 2 and the path of ``divergence.json``.
    """
    audit = RunAuditLogger(out_dir)
    threads = threads or config.threads
    ops = list(ops) if ops is not None else config.twin_ops()
    unified = config.mode == "unified"
    window = config.world.window
    rows: List[NmseRow] = []
    histories: Dict[str, List[RoundRecord]] = {}
    ledgers: Dict[str, Dict[str, CostLedger]] = {}
    downstream: List[Dict[str, Any]] = []
    step_sizes: Dict[str, Any] = {}

    try:
        if not ops:
            raise ConfigError("no ops to run")
        data = prepare_data(config)
        for op in ops:
            missing = [m.value for m in op.modalities if m not in data.modalities]
            if missing:
                raise ConfigError(f"op {op.notation()} needs modalities {missing} absent from the dataset")
        audit.log_event("run_started", {
            "ops": [op.notation() for op in ops],
            "fusors": [f.value for f in config.twin.fusor_sweep()],
            "seeds": list(config.seeds),
            "mode": config.mode,
            "data": data.source,
        })

        train = data.train_examples(window)
        held_out = data.held_out_examples(window)
        for fusor in config.twin.fusor_sweep():
            for seed in config.seeds:
                label = run_label(fusor, seed)
                logger.info(f"Run {label}: mapping {len(data.train.areas)} areas")
                mapped, mapping, step_size = _map_areas(config, data, fusor, seed, threads, audit)
                histories[label] = mapping.history
                step_sizes[label] = step_size
                ledgers[label] = {
                    "federated": mapping.ledger,
                    "centralized": FederationService.cost_compare(
                        config.fed, data.raw, mapped.param_count, len(data.modalities)
                    )["centralized"],
                }
                _checkpoint(config, out_dir, label, "mapped", mapped)

                unified_twin = None
                for k, op in enumerate(ops):
                    if unified:
                        if unified_twin is None:
                            unified_twin, _ = TwinService.transform(
                                mapped, op, train, config.transform, config.twin,
                                RngStream(seed).fork(TRANSFORM_STREAM), unified=True,
                            )
                        twin = unified_twin
                    else:
                        twin, _ = TwinService.transform(
                            mapped, op, train, config.transform, config.twin,
                            RngStream(seed).fork(TRANSFORM_STREAM, k),
                        )
                    overall, per_target = evaluate_op(twin, held_out, op)
                    rows.append(NmseRow(
                        fusor=fusor.value, op=op.notation(), mode=config.mode, seed=seed,
                        nmse=overall.value, per_target={m: r.value for m, r in per_target.items()},
                        samples=overall.samples,
                    ))
                    downstream.extend(_downstream_rows(twin, held_out, op, fusor, config.mode, seed, window,
                                                         data.held_out.scalers))
                    _checkpoint(config, out_dir, label, op_slug(op), twin)
                    audit.log_event("transform_finished", {
                        "run": label, "op": op.notation(), "nmse": overall.value,
                    })
                    logger.info(f"Run {label} {op.notation()}: NMSE {overall.value:.4f}")

        paths = emit_report(histories, rows, ledgers, out_dir, charts=config.charts, downstream=downstream)
        paths["manifest"] = write_manifest(out_dir, config, {"step_size": step_sizes})
        audit.log_event("report_emitted", {"files": sorted(paths)})
        return {"status": "success", "exit_code": 0, "files": paths, "rows": len(rows)}

    except DivergenceError as e:
        logger.error(f"Run diverged: {e}")
        report = audit.log_divergence(e)
        return {"status": "error", "exit_code": e.exit_code, "message": str(e), "divergence_report": report}
    except TwinError as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return {"status": "error", "exit_code": e.exit_code, "message": str(e)}


def run_kind(config: ExperimentConfig, out_dir: str, kind: str, op_texts: Optional[Sequence[str]] = None,
             threads: Optional[int] = None) -> Dict[str, Any]:
    """``transfer`` / ``merge`` / ``split``: run only ops of that kind"""
    try:
        if op_texts:
            ops = [TwinOp.parse(text) for text in op_texts]
        else:
            ops = config.twin_ops()
        ops = [op for op in ops if op.kind.value == kind]
        if not ops:
            raise ConfigError(f"no {kind} ops given (use --op or list them in the config)")
    except TwinError as e:
        logger.error(f"Invalid {kind} request: {e}")
        return {"status": "error", "exit_code": e.exit_code, "message": str(e)}
    return run_experiment(config, out_dir, threads=threads, ops=ops)
