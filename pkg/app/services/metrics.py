"""
Normalized MSE, downstream checks and report files.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from ..errors import ReportIOError, ShapeError, UndefinedNormalizationError  # noqa: E402
from ..records.models import CostLedger, NmseRow, RoundRecord  # noqa: E402
from .scenario import Example, Modality, range_from_rssi  # noqa: E402
from .twin import TwinModel, TwinOp, TwinService  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["fusor", "op", "mode", "seed", "nmse", "per_target", "samples", "mean_nmse", "std_nmse"]
HISTORY_COLUMNS = ["run", "round", "area", "loss", "grad_norm_sq", "up_bytes", "down_bytes", "wall_ms"]
COST_COLUMNS = ["run", "mode", "upload_bytes", "download_bytes", "header_bytes", "payload_bytes",
                "total_bytes", "messages", "local_steps", "server_steps"]
DOWNSTREAM_COLUMNS = ["fusor", "op", "mode", "seed", "task", "source", "nmse", "samples"]
FLOAT_FORMAT = "%.17g"


@dataclass
class NmseResult:
    value: float
    target: Optional[str]
    samples: int


def nmse(pred, truth, target: Optional[str] = None) -> NmseResult:
    """
    100 * sum ||pred - truth||^2 / sum ||truth - mean(truth)||^2, pooled
    over samples and coordinates

    Raises:
        ShapeError: shapes differ
        UndefinedNormalizationError: truth has no variance
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if p.ndim == 1:
        p = p[:, None]
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match truth {t.shape}")
    if t.shape[0] < 2:
        raise UndefinedNormalizationError("NMSE needs at least two samples")
    residual = np.sum((p - t) ** 2)
    spread = np.sum((t - t.mean(axis=0)) ** 2)
    if spread == 0.0:
        raise UndefinedNormalizationError("ground truth has zero variance")
    return NmseResult(value=float(100.0 * residual / spread), target=target, samples=int(t.shape[0]))


def evaluate_op(twin: TwinModel, examples: Sequence[Example], op: TwinOp) -> Tuple[NmseResult, Dict[str, NmseResult]]:
    """
    NMSE of ``op`` over ``examples``; the overall value pools every target

    Returns:
        (overall, per-target results keyed by modality name)
    """
    preds: Dict[Modality, List[np.ndarray]] = {m: [] for m in op.targets}
    truths: Dict[Modality, List[np.ndarray]] = {m: [] for m in op.targets}
    for example in examples:
        outputs = TwinService.reconstruct(twin, example, op)
        for m in op.targets:
            preds[m].append(outputs[m])
            truths[m].append(TwinService.target_of(twin, example, m))
    per_target = {}
    residual = 0.0
    spread = 0.0
    for m in op.targets:
        p, t = np.stack(preds[m]), np.stack(truths[m])
        per_target[m.value] = nmse(p, t, target=m.value)
        residual += float(np.sum((p - t) ** 2))
        spread += float(np.sum((t - t.mean(axis=0)) ** 2))
    overall = NmseResult(value=100.0 * residual / spread, target=op.notation(), samples=len(examples))
    return overall, per_target


def trajectory_prediction_nmse(windows: Sequence[np.ndarray], truth_windows: Optional[Sequence[np.ndarray]] = None,
                               channels: int = 2) -> NmseResult:
    """
    Downstream trajectory check on visual windows

    The last position of each window is extrapolated at constant velocity
    from the two before it and scored against the last position of the
    matching ``truth_windows`` entry (defaults to ``windows``).
    """
    source = [np.asarray(w, dtype=np.float64).reshape(channels, -1) for w in windows]
    truth = source if truth_windows is None else [
        np.asarray(w, dtype=np.float64).reshape(channels, -1) for w in truth_windows
    ]
    if len(source) != len(truth):
        raise ShapeError("one truth window per predicted window is required")
    if not source or source[0].shape[1] < 3:
        raise ShapeError("trajectory prediction needs windows of at least 3 samples")
    pred = np.stack([2.0 * w[:, -2] - w[:, -3] for w in source])
    actual = np.stack([w[:, -1] for w in truth])
    return nmse(pred, actual, target="V")


def _channel_major(windows: Sequence[np.ndarray], channels: int) -> List[np.ndarray]:
    return [np.asarray(w, dtype=np.float64).reshape(channels, -1) for w in windows]


def positioning_nmse(windows: Sequence[np.ndarray], truth_windows: Optional[Sequence[np.ndarray]] = None,
                     scaler=None) -> NmseResult:
    """
    Downstream positioning check on wireless windows

    Each sample's RSSI is turned back into a distance with the log-distance
    model and scored against the measured range of the matching truth window.
    ``scaler`` (the fitted W scaler) maps standardized windows back to dB and
    metres first.
    """
    source = _channel_major(windows, 2)
    truth = source if truth_windows is None else _channel_major(truth_windows, 2)
    if len(source) != len(truth):
        raise ShapeError("one truth window per predicted window is required")
    if not source:
        raise ShapeError("positioning needs at least one window")

    def physical(w: np.ndarray) -> np.ndarray:
        samples = w.T
        return scaler.inverse_transform(samples) if scaler is not None else samples

    pred = np.concatenate([range_from_rssi(physical(w)[:, 1]) for w in source])
    actual = np.concatenate([physical(w)[:, 0] for w in truth])
    return nmse(pred, actual, target="W")


def inertial_generation_nmse(windows: Sequence[np.ndarray],
                             truth_windows: Optional[Sequence[np.ndarray]] = None) -> NmseResult:
    """
    Downstream dead-reckoning check on sensory windows

    Window sums of the acceleration channels (velocity change) and of the
    heading rate (heading change), scored against the truth window's sums.
    """
    source = _channel_major(windows, 3)
    truth = source if truth_windows is None else _channel_major(truth_windows, 3)
    if len(source) != len(truth):
        raise ShapeError("one truth window per predicted window is required")
    if not source:
        raise ShapeError("inertial generation needs at least one window")
    pred = np.stack([w.sum(axis=1) for w in source])
    actual = np.stack([w.sum(axis=1) for w in truth])
    return nmse(pred, actual, target="S")


def _per_target_text(values: Dict[str, float]) -> str:
    return ";".join(f"{name}:{values[name]!r}" for name in sorted(values))


def results_frame(rows: Sequence[NmseRow]) -> pd.DataFrame:
    if not rows:
        return pd.DataFrame(columns=RESULT_COLUMNS)
    frame = pd.DataFrame([{
        "fusor": r.fusor,
        "op": r.op,
        "mode": r.mode,
        "seed": r.seed,
        "nmse": r.nmse,
        "per_target": _per_target_text(r.per_target),
        "samples": r.samples,
    } for r in rows])
    grouped = frame.groupby(["fusor", "op", "mode"], sort=False)["nmse"]
    frame["mean_nmse"] = grouped.transform("mean")
    frame["std_nmse"] = grouped.transform(lambda s: float(np.std(s.to_numpy(), ddof=0)))
    return frame[RESULT_COLUMNS]


def history_frame(histories: Dict[str, Sequence[RoundRecord]]) -> pd.DataFrame:
    """One row per area per round, then one global row (empty ``area``) per round"""
    records = []
    for run, history in histories.items():
        for rec in history:
            for i, loss in enumerate(rec.area_losses):
                records.append({
                    "run": run, "round": rec.round, "area": str(i), "loss": loss,
                    "grad_norm_sq": "", "up_bytes": rec.area_up_bytes[i] if rec.area_up_bytes else "",
                    "down_bytes": rec.area_down_bytes[i] if rec.area_down_bytes else "", "wall_ms": "",
                })
            records.append({
                "run": run, "round": rec.round, "area": "", "loss": rec.global_loss,
                "grad_norm_sq": rec.grad_norm_sq, "up_bytes": rec.up_bytes,
                "down_bytes": rec.down_bytes, "wall_ms": rec.wall_ms,
            })
    return pd.DataFrame(records, columns=HISTORY_COLUMNS)


def costs_frame(ledgers: Dict[str, Dict[str, CostLedger]]) -> pd.DataFrame:
    records = []
    for run, pair in ledgers.items():
        for ledger in pair.values():
            records.append({"run": run, **ledger.to_row()})
    return pd.DataFrame(records, columns=COST_COLUMNS)


def render_chart(frame: pd.DataFrame, path: str) -> int:
    """
    Grouped bars of mean NMSE, one group per op, one bar per fusor

    Every bar carries the SVG id ``bar-<op>-<fusor>``.

    Returns:
        number of bars drawn
    """
    plt.rcParams["svg.hashsalt"] = "twin-report"
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = 0
    if not frame.empty:
        summary = frame.groupby(["op", "fusor"], sort=False)["nmse"].mean()
        ops = list(dict.fromkeys(frame["op"]))
        fusors = list(dict.fromkeys(frame["fusor"]))
        width = 0.8 / len(fusors)
        for j, fusor in enumerate(fusors):
            for i, op in enumerate(ops):
                if (op, fusor) not in summary.index:
                    continue
                (patch,) = ax.bar(i + j * width, summary[(op, fusor)], width,
                                  color=f"C{j}", label=fusor if i == 0 else None)
                patch.set_gid(f"bar-{op}-{fusor}")
                bars += 1
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(ops))])
        ax.set_xticklabels(ops)
        ax.legend(title="fusor")
    ax.set_ylabel("NMSE")
    ax.set_title("Twin transformation NMSE by fusor")
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return bars


def emit_report(histories: Dict[str, Sequence[RoundRecord]], rows: Sequence[NmseRow],
                ledgers: Dict[str, Dict[str, CostLedger]], out_dir: str, charts: bool = True,
                downstream: Optional[Sequence[Dict[str, object]]] = None) -> Dict[str, str]:
    """
    Write results.csv, history.csv, costs.csv, downstream.csv and charts.svg

    Returns:
        file kind -> path

    Raises:
        ReportIOError: a file could not be written (carries the path)
    """
    paths = {
        "results": os.path.join(out_dir, "results.csv"),
        "history": os.path.join(out_dir, "history.csv"),
        "costs": os.path.join(out_dir, "costs.csv"),
    }
    frames = {
        "results": results_frame(rows),
        "history": history_frame(histories),
        "costs": costs_frame(ledgers),
    }
    if downstream is not None:
        paths["downstream"] = os.path.join(out_dir, "downstream.csv")
        frames["downstream"] = pd.DataFrame(list(downstream), columns=DOWNSTREAM_COLUMNS)
    current = out_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
        for kind, frame in frames.items():
            current = paths[kind]
            frame.to_csv(current, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        if charts:
            current = paths["charts"] = os.path.join(out_dir, "charts.svg")
            render_chart(frames["results"], current)
    except OSError as e:
        raise ReportIOError(f"cannot write report: {e}", path=current) from e
    logger.info(f"Report written to {out_dir} ({', '.join(sorted(paths))})")
    return paths
