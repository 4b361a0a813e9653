"""
Distributed mapping over local areas.

Each global round broadcasts the model, lets every area run ``local_steps``
gradient steps on its own data, uploads the results and aggregates them,
either by plain parameter averaging or by the gated adaptive rule with
per-modality second-moment accumulators.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np

from ..errors import ConfigError, DivergenceError, EstimationError, ShapeError
from ..records.models import CostLedger, RoundRecord
from . import nn
from .numerics import RngStream, ordered_sum
from .scenario import Example, MultiModalDataset, ScenarioService
from .twin import TwinModel, TwinOp, TwinService

logger = logging.getLogger(__name__)

AREA_STREAM = 0
ESTIMATE_STREAM = 1


@dataclass
class Evaluation:
    loss: float
    grad: np.ndarray
    per_modality: Dict[str, np.ndarray]


class Objective(Protocol):
    """A local objective F_i; ``evaluate`` draws its minibatch from ``rng`` (None = full batch)"""

    modalities: List[str]

    def evaluate(self, params: np.ndarray, rng: Optional[RngStream] = None) -> Evaluation:
        ...


class TwinObjective:
    """One area's twin objective for a fixed op"""

    def __init__(self, template: TwinModel, examples: Sequence[Example], op: TwinOp, batch_size: int = 0):
        self.template = template
        self.examples = list(examples)
        self.op = op
        self.batch_size = batch_size
        self.modalities = [m.value for m in op.targets]

    def evaluate(self, params: np.ndarray, rng: Optional[RngStream] = None) -> Evaluation:
        twin = self.template.with_params(params)
        if rng is None:
            batch = self.examples
        else:
            batch = TwinService.sample_batch(self.examples, self.batch_size, rng)
        result = TwinService.loss_and_grad(twin, batch, self.op)
        return Evaluation(
            loss=result.loss,
            grad=result.grad,
            per_modality={m.value: g for m, g in result.per_target.items()},
        )


class QuadraticObjective:
    """
    f(x) = 0.5 * sum(curvature * (x - center)^2) + slope . x

    Gradients split evenly over ``modalities``.
    """

    def __init__(self, dim: int = 1, curvature=1.0, center=0.0, slope=0.0,
                 modalities: Sequence[str] = ("q",)):
        self.curvature = np.broadcast_to(np.asarray(curvature, dtype=np.float64), (dim,)).copy()
        self.center = np.broadcast_to(np.asarray(center, dtype=np.float64), (dim,)).copy()
        self.slope = np.broadcast_to(np.asarray(slope, dtype=np.float64), (dim,)).copy()
        self.modalities = list(modalities)

    def evaluate(self, params: np.ndarray, rng: Optional[RngStream] = None) -> Evaluation:
        x = np.asarray(params, dtype=np.float64)
        diff = x - self.center
        loss = float(0.5 * np.sum(self.curvature * diff * diff) + self.slope @ x)
        grad = self.curvature * diff + self.slope
        share = grad / len(self.modalities)
        return Evaluation(loss=loss, grad=grad, per_modality={m: share.copy() for m in self.modalities})


@dataclass
class LocalResult:
    params: np.ndarray
    delta: np.ndarray
    losses: List[float]
    partials: Dict[str, np.ndarray]
    path: List[np.ndarray] = field(default_factory=list)


@dataclass
class AggregatorState:
    """Per-modality accumulators omega (>= 0, shaped like theta) and the round index"""

    omega: List[np.ndarray]
    round: int = 0

    @classmethod
    def zeros(cls, modality_count: int, size: int) -> "AggregatorState":
        return cls(omega=[np.zeros(size) for _ in range(modality_count)])


@dataclass
class StepSizeCheck:
    bound: float
    eta_l: Optional[float]
    passed: Optional[bool]
    cube_root_term: float
    damping_term: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "bound": self.bound,
            "eta_l": self.eta_l,
            "passed": self.passed,
            "cube_root_term": self.cube_root_term,
            "damping_term": self.damping_term,
        }


@dataclass
class ConstantsEstimate:
    G: float
    L: float
    local_variance: float
    global_variance: float
    pairs_used: int

    def to_dict(self) -> Dict[str, float]:
        return {"G": self.G, "L": self.L, "local_variance": self.local_variance,
                "global_variance": self.global_variance, "pairs_used": self.pairs_used}


@dataclass
class MappingResult:
    params: np.ndarray
    history: List[RoundRecord]
    ledger: CostLedger
    state: Optional[AggregatorState] = None


@dataclass
class ConvergenceReport:
    initial: float
    final: float
    minimum: float
    ratio: float
    running_min: List[float]
    diverged: bool

    def below(self, fraction: float) -> bool:
        return not self.diverged and self.minimum < fraction * self.initial


class FederationService:

    @staticmethod
    def local_train(objective: Objective, params, steps: int, lr: float, rng: RngStream,
                    round: Optional[int] = None, area: Optional[int] = None,
                    keep_path: bool = False) -> LocalResult:
        """
        ``steps`` gradient steps from ``params``

        ``partials[m]`` is -lr times the sum of modality m's gradient parts,
        so the partials add up to the update when every step succeeds.

        Raises:
            DivergenceError: non-finite loss, gradient or parameters
        """
        if steps < 0:
            raise ConfigError("local steps must be >= 0")
        theta = np.array(params, dtype=np.float64, copy=True)
        start = theta.copy()
        losses: List[float] = []
        partials = {m: np.zeros_like(theta) for m in objective.modalities}
        path = []
        for step in range(steps):
            if keep_path:
                path.append(theta.copy())
            ev = objective.evaluate(theta, rng)
            if not math.isfinite(ev.loss) or not np.all(np.isfinite(ev.grad)):
                raise DivergenceError(
                    f"local training diverged (round {round}, area {area}, step {step})",
                    round=round, area=area, step=step, loss=ev.loss,
                )
            losses.append(ev.loss)
            theta = nn.sgd_step(theta, ev.grad, lr)
            for m in objective.modalities:
                partials[m] = partials[m] - lr * ev.per_modality[m]
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(
                    f"parameters overflowed (round {round}, area {area}, step {step})",
                    round=round, area=area, step=step, loss=ev.loss,
                )
        return LocalResult(params=theta, delta=theta - start, losses=losses, partials=partials, path=path)

    @staticmethod
    def train_centralized(objective: Objective, params, steps: int, lr: float, seed: int) -> LocalResult:
        """Single-site training with the stream area 0 would use"""
        return FederationService.local_train(objective, params, steps, lr,
                                             RngStream(seed).fork(AREA_STREAM, 0))

    @staticmethod
    def aggregate_mean(models: Sequence[np.ndarray]) -> np.ndarray:
        """
        Coordinate-wise mean, summed in the given order

        Computed as u0 + sum(u_i - u0) / n, which returns u0 unchanged when all
        models are equal.
        """
        if not models:
            raise ShapeError("nothing to aggregate")
        base = np.asarray(models[0], dtype=np.float64)
        for u in models:
            if np.shape(u) != base.shape:
                raise ShapeError(f"model shapes differ: {np.shape(u)} vs {base.shape}")
        offsets = ordered_sum([np.asarray(u, dtype=np.float64) - base for u in models])
        return base + offsets / len(models)

    @staticmethod
    def gated_adaptive_step(state: AggregatorState, deltas: Sequence[np.ndarray], cfg):
        """
        omega_m <- eps * omega_m + (1 - eps) * delta_m^2
        step = eta * sum_m alpha_m * delta_m / (sqrt(omega_m) + mu)

        Returns:
            (step, new state)
        """
        if cfg.mu <= 0:
            raise ConfigError("mu must be positive")
        if not 0.0 <= cfg.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if len(deltas) != len(state.omega):
            raise ShapeError(f"{len(deltas)} modality updates for {len(state.omega)} accumulators")
        alpha = cfg.mixture_weights(len(deltas))
        eps = cfg.epsilon
        omega = []
        terms = []
        for m, delta in enumerate(deltas):
            delta = np.asarray(delta, dtype=np.float64)
            if delta.shape != state.omega[m].shape:
                raise ShapeError(f"update {m} has shape {delta.shape}, accumulator {state.omega[m].shape}")
            w = eps * state.omega[m] + (1.0 - eps) * delta * delta
            omega.append(w)
            terms.append(alpha[m] * delta / (np.sqrt(w) + cfg.mu))
        step = cfg.global_lr * ordered_sum(terms)
        return step, AggregatorState(omega=omega, round=state.round + 1)

    @staticmethod
    def check_step_size(G: float, L: float, mu: float, beta: int, eta: float,
                        eta_l: Optional[float] = None) -> StepSizeCheck:
        """
        Local step-size bound:
        eta_l <= 1/(16 beta) * min((mu / (120 G L^2))^(1/3), mu / (4G + 2 eta L))
        """
        for name, value in (("G", G), ("L", L), ("mu", mu), ("beta", beta), ("eta", eta)):
            if value is None or not value > 0:
                raise ConfigError(f"{name} must be positive for the step-size bound")
        cube_root_term = (mu / (120.0 * G * L * L)) ** (1.0 / 3.0)
        damping_term = mu / (4.0 * G + 2.0 * eta * L)
        bound = min(cube_root_term, damping_term) / (16.0 * beta)
        passed = None if eta_l is None else bool(eta_l <= bound)
        return StepSizeCheck(bound=bound, eta_l=eta_l, passed=passed,
                             cube_root_term=cube_root_term, damping_term=damping_term)

    @staticmethod
    def estimate_constants(objectives: Sequence[Objective], params, samples: int, rng: RngStream,
                           radius: float = 0.1) -> ConstantsEstimate:
        """
        Empirical lower bounds on the smoothness and gradient constants

        Samples ``samples`` points around ``params``. G is the largest
        coordinate gradient magnitude seen, L the largest gradient-difference
        ratio over consecutive point pairs (identical pairs skipped). The local
        variance is the largest per-coordinate mean squared gap between a
        minibatch gradient and the full gradient; the global variance the
        largest per-coordinate mean squared gap between an area gradient and
        the mean gradient.

        Raises:
            EstimationError: every pair was degenerate
        """
        if samples < 2:
            raise ConfigError("estimate_constants needs at least 2 samples")
        if not objectives:
            raise ConfigError("estimate_constants needs at least one objective")
        base = np.asarray(params, dtype=np.float64)
        points = [base + rng.normal(radius, base.shape) if radius > 0 else base.copy() for _ in range(samples)]

        full = [[obj.evaluate(x, None).grad for obj in objectives] for x in points]
        g_hat = max(float(np.max(np.abs(g))) for grads in full for g in grads)

        l_hat = 0.0
        pairs = 0
        for k in range(samples - 1):
            gap = float(np.linalg.norm(points[k + 1] - points[k]))
            if gap == 0.0:
                continue
            pairs += 1
            for i in range(len(objectives)):
                l_hat = max(l_hat, float(np.linalg.norm(full[k + 1][i] - full[k][i])) / gap)
        if pairs == 0:
            raise EstimationError("all sampled points coincide; cannot estimate L")

        local_var = 0.0
        global_var = 0.0
        for x, grads in zip(points, full):
            mean_grad = FederationService.aggregate_mean(grads)
            spread = [(g - mean_grad) ** 2 for g in grads]
            global_var = max(global_var, float(np.max(ordered_sum(spread) / len(grads))))
            for obj, g in zip(objectives, grads):
                noisy = obj.evaluate(x, rng).grad
                local_var = max(local_var, float(np.max((noisy - g) ** 2)))
        estimate = ConstantsEstimate(G=g_hat, L=l_hat, local_variance=local_var,
                                     global_variance=global_var, pairs_used=pairs)
        logger.info(f"Estimated constants: G={g_hat:.4g} L={l_hat:.4g} "
                    f"var_local={local_var:.4g} var_global={global_var:.4g}")
        return estimate

    @staticmethod
    def _monitor(objectives: Sequence[Objective], monitor: Optional[Objective], theta: np.ndarray):
        if monitor is not None:
            ev = monitor.evaluate(theta, None)
            return ev.loss, float(ev.grad @ ev.grad)
        evs = [obj.evaluate(theta, None) for obj in objectives]
        grad = FederationService.aggregate_mean([ev.grad for ev in evs])
        loss = float(np.mean([ev.loss for ev in evs]))
        return loss, float(grad @ grad)

    @staticmethod
    def run_mapping(cfg, objectives: Sequence[Objective], params, seed: int,
                    monitor: Optional[Objective] = None, threads: int = 1,
                    on_round=None) -> MappingResult:
        """
        ``cfg.rounds`` rounds of broadcast, local training, upload, aggregation

        Area i draws from ``RngStream(seed).fork(0, i)`` for the whole run.
        Local work runs on up to ``threads`` threads and is gathered in area
        order, so the result does not depend on ``threads``.
        ``monitor`` scores the broadcast model each round; without one the
        area objectives are averaged.

        Raises:
            DivergenceError: an area or the aggregate went non-finite
        """
        if not objectives:
            raise ConfigError("run_mapping needs at least one area")
        theta = np.array(params, dtype=np.float64, copy=True)
        size = theta.size
        n = len(objectives)
        modalities = list(objectives[0].modalities)
        gated = cfg.aggregation == "gated"
        if gated:
            cfg.mixture_weights(len(modalities))
        master = RngStream(seed)
        area_rngs = [master.fork(AREA_STREAM, i) for i in range(n)]
        state = AggregatorState.zeros(len(modalities), size) if gated else None
        ledger = CostLedger(mode="federated")
        history: List[RoundRecord] = []
        uploads_per_area = len(modalities) if gated else 1

        def train_area(i: int) -> LocalResult:
            return FederationService.local_train(objectives[i], theta, cfg.local_steps, cfg.local_lr,
                                                 area_rngs[i], round=t, area=i)

        pool = ThreadPool(processes=min(threads, n)) if threads > 1 and n > 1 else None
        try:
            for t in range(cfg.rounds):
                started = time.perf_counter()
                global_loss, grad_norm_sq = FederationService._monitor(objectives, monitor, theta)
                ledger.download(size, messages=n)

                if pool is not None:
                    results = pool.map(train_area, range(n))
                else:
                    results = [train_area(i) for i in range(n)]
                ledger.upload(size, messages=n * uploads_per_area)
                ledger.compute(local=n * cfg.local_steps, server=1)

                if gated:
                    deltas = [
                        ordered_sum([r.partials[m] for r in results]) / n
                        for m in modalities
                    ]
                    step, state = FederationService.gated_adaptive_step(state, deltas, cfg)
                    theta = theta + step
                else:
                    theta = FederationService.aggregate_mean([r.params for r in results])
                if not np.all(np.isfinite(theta)):
                    raise DivergenceError(f"aggregated model is non-finite after round {t}",
                                          round=t, loss=global_loss)

                payload = size * 8
                record = RoundRecord(
                    round=t,
                    area_losses=[r.losses[-1] if r.losses else float("nan") for r in results],
                    global_loss=global_loss,
                    grad_norm_sq=grad_norm_sq,
                    up_bytes=n * uploads_per_area * payload,
                    down_bytes=n * payload,
                    area_up_bytes=[uploads_per_area * payload] * n,
                    area_down_bytes=[payload] * n,
                    wall_ms=(time.perf_counter() - started) * 1000.0,
                )
                history.append(record)
                if on_round is not None:
                    on_round(record)
                logger.info(f"Round {t}: held-out loss {global_loss:.6g}, |grad|^2 {grad_norm_sq:.6g}")
        finally:
            if pool is not None:
                pool.close()
                pool.join()
        return MappingResult(params=theta, history=history, ledger=ledger, state=state)

    @staticmethod
    def area_objectives(dataset: MultiModalDataset, template: TwinModel, op: TwinOp, window: int,
                        batch_size: int) -> List[TwinObjective]:
        """One objective per area over that area's windows"""
        objectives = []
        for area in dataset.areas:
            examples = ScenarioService.window(MultiModalDataset(areas=[area]), window, op.modalities)
            objectives.append(TwinObjective(template, examples, op, batch_size))
        return objectives

    @staticmethod
    def convergence_report(history: Sequence[RoundRecord]) -> ConvergenceReport:
        if not history:
            raise EstimationError("no rounds recorded")
        values = [r.grad_norm_sq for r in history]
        diverged = not all(math.isfinite(v) for v in values)
        running = []
        best = math.inf
        for v in values:
            if math.isfinite(v):
                best = min(best, v)
            running.append(best)
        initial = values[0]
        ratio = running[-1] / initial if initial > 0 else 0.0
        return ConvergenceReport(initial=initial, final=values[-1], minimum=running[-1], ratio=ratio,
                                 running_min=running, diverged=diverged)

    @staticmethod
    def cost_compare(cfg, dataset: MultiModalDataset, param_count: int, modality_count: int,
                     direct_param_counts: Optional[Dict[str, int]] = None) -> Dict[str, CostLedger]:
        """
        Closed-form ledgers for federated, centralized and (optionally) direct
        single-modality mapping

        Federated: every round downloads the model to n areas and uploads one
        model (mean) or one partial per modality (gated) from each. Centralized:
        each non-empty area ships its raw samples once, the server trains
        rounds x local_steps steps and sends the model back once.
        """
        n = len(dataset.areas)
        rounds = cfg.rounds
        uploads = modality_count if cfg.aggregation == "gated" else 1

        federated = CostLedger(mode="federated")
        federated.download(param_count, messages=rounds * n)
        federated.upload(param_count, messages=rounds * n * uploads)
        federated.compute(local=rounds * n * cfg.local_steps, server=rounds)

        centralized = CostLedger(mode="centralized")
        for area in dataset.areas:
            size = sum(v.size * 8 for v in area.samples.values())
            if size > 0:
                centralized.upload_raw_bytes(size)
        if dataset.raw_bytes() > 0:
            centralized.download(param_count)
        centralized.compute(server=rounds * cfg.local_steps)

        ledgers = {"federated": federated, "centralized": centralized}
        if direct_param_counts:
            direct = CostLedger(mode="direct")
            for count in direct_param_counts.values():
                direct.download(count, messages=rounds * n)
                direct.upload(count, messages=rounds * n)
                direct.compute(local=rounds * n * cfg.local_steps, server=rounds)
            ledgers["direct"] = direct
        return ledgers
