"""
Fusors: combine per-modality feature vectors into one vector.

Average is computed as an offset from the first vector so k identical inputs
return that vector bit for bit.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from .numerics import RngStream, _sigmoid_unchecked, ordered_sum, softmax

logger = logging.getLogger(__name__)


class FusorKind(str, Enum):
    ADDITION = "addition"
    AVERAGE = "average"
    CONCATENATION = "concatenation"
    MULTIPLICATION = "multiplication"
    MAXIMUM = "maximum"
    MINIMUM = "minimum"
    GATING = "gating"
    ATTENTION = "attention"

    @property
    def learnable(self) -> bool:
        return self in (FusorKind.GATING, FusorKind.ATTENTION)


@dataclass
class FusorParams:
    """
    Learnable fusor weights keyed by modality name

    ``gating`` holds one d x d matrix W_m per modality, ``attention`` one
    scoring vector per modality (score e_m = scorer_m . f_m).
    """

    gating: Dict[str, np.ndarray] = field(default_factory=dict)
    attention: Dict[str, np.ndarray] = field(default_factory=dict)

    def for_kind(self, kind: FusorKind) -> Dict[str, np.ndarray]:
        if kind == FusorKind.GATING:
            return self.gating
        if kind == FusorKind.ATTENTION:
            return self.attention
        return {}


@dataclass
class FuseContext:
    """Forward values kept for ``backward_from_context``"""

    kind: FusorKind
    features: List[np.ndarray]
    modalities: List[str]
    output: np.ndarray
    params: Optional[FusorParams] = None
    weights: Optional[np.ndarray] = None

    def param(self, name: str) -> np.ndarray:
        return self.params.for_kind(self.kind)[name]


class FusionService:
    """
    Modality fusion operators

    Every operator maps m feature vectors of length d to one fused vector:
    length m*d for concatenation, d otherwise. Gating and attention read their
    parameters for the modalities actually present.
    """

    @staticmethod
    def fused_dim(kind: FusorKind, m: int, d: int) -> int:
        if m < 1 or d < 1:
            raise ConfigError("fused_dim needs m >= 1 and d >= 1")
        return m * d if FusorKind(kind) == FusorKind.CONCATENATION else d

    @staticmethod
    def init_params(kind: FusorKind, modalities: Sequence[str], d: int, rng: RngStream) -> FusorParams:
        kind = FusorKind(kind)
        params = FusorParams()
        limit = np.sqrt(6.0 / (2 * d))
        for name in modalities:
            if kind == FusorKind.GATING:
                params.gating[name] = rng.uniform(-limit, limit, (d, d))
            elif kind == FusorKind.ATTENTION:
                params.attention[name] = rng.uniform(-limit, limit, d)
        return params

    @staticmethod
    def _check(kind: FusorKind, features: Sequence[np.ndarray], params: Optional[FusorParams],
               modalities: Optional[Sequence[str]]) -> Tuple[List[np.ndarray], List[str]]:
        if not features:
            raise ShapeError("fusion needs at least one feature vector")
        vectors = [np.asarray(f, dtype=np.float64).reshape(-1) for f in features]
        d = vectors[0].size
        for v in vectors:
            if v.size != d:
                raise ShapeError(f"feature lengths differ: {v.size} vs {d}")
        names = list(modalities) if modalities is not None else [str(i) for i in range(len(vectors))]
        if len(names) != len(vectors):
            raise ShapeError("one modality name per feature vector is required")
        if kind.learnable:
            table = params.for_kind(kind) if params is not None else {}
            missing = [n for n in names if n not in table]
            if missing:
                raise ConfigError(f"{kind.value} fusion is missing parameters for {missing}")
        return vectors, names

    @staticmethod
    def fuse(kind: FusorKind, features: Sequence[np.ndarray], params: Optional[FusorParams] = None,
             modalities: Optional[Sequence[str]] = None) -> np.ndarray:
        fused, _ = FusionService.fuse_with_context(kind, features, params, modalities)
        return fused

    @staticmethod
    def fuse_with_context(kind: FusorKind, features: Sequence[np.ndarray],
                          params: Optional[FusorParams] = None,
                          modalities: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, FuseContext]:
        kind = FusorKind(kind)
        vectors, names = FusionService._check(kind, features, params, modalities)
        weights = None
        if kind == FusorKind.ADDITION:
            out = ordered_sum(vectors)
        elif kind == FusorKind.AVERAGE:
            base = vectors[0]
            out = base + ordered_sum([v - base for v in vectors]) / len(vectors)
        elif kind == FusorKind.CONCATENATION:
            out = np.concatenate(vectors)
        elif kind == FusorKind.MULTIPLICATION:
            out = vectors[0].copy()
            for v in vectors[1:]:
                out = out * v
        elif kind == FusorKind.MAXIMUM:
            out = vectors[0].copy()
            for v in vectors[1:]:
                out = np.maximum(out, v)
        elif kind == FusorKind.MINIMUM:
            out = vectors[0].copy()
            for v in vectors[1:]:
                out = np.minimum(out, v)
        elif kind == FusorKind.GATING:
            z = ordered_sum([params.gating[n] @ v for n, v in zip(names, vectors)])
            out = _sigmoid_unchecked(z)
        else:
            scores = np.array([float(params.attention[n] @ v) for n, v in zip(names, vectors)])
            weights = softmax(scores)
            out = ordered_sum([w * v for w, v in zip(weights, vectors)])
        ctx = FuseContext(kind=kind, features=vectors, modalities=names, output=out,
                          params=params, weights=weights)
        return out, ctx

    @staticmethod
    def backward_from_context(ctx: FuseContext, d_out) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        """
        Gradients of the fused output w.r.t. each feature and each parameter

        Max/min route the gradient to the attaining modality, lowest index on
        ties.

        Returns:
            (per-feature gradients in input order, parameter gradients by modality)
        """
        kind, vectors, names = ctx.kind, ctx.features, ctx.modalities
        g = np.asarray(d_out, dtype=np.float64).reshape(-1)
        if g.size != ctx.output.size:
            raise ShapeError(f"d_out has {g.size} entries, fused output has {ctx.output.size}")
        m, d = len(vectors), vectors[0].size
        param_grads: Dict[str, np.ndarray] = {}

        if kind == FusorKind.ADDITION:
            grads = [g.copy() for _ in vectors]
        elif kind == FusorKind.AVERAGE:
            grads = [g / m for _ in vectors]
        elif kind == FusorKind.CONCATENATION:
            grads = [g[i * d:(i + 1) * d].copy() for i in range(m)]
        elif kind == FusorKind.MULTIPLICATION:
            grads = []
            for i in range(m):
                others = np.ones(d)
                for j in range(m):
                    if j != i:
                        others = others * vectors[j]
                grads.append(g * others)
        elif kind in (FusorKind.MAXIMUM, FusorKind.MINIMUM):
            stacked = np.stack(vectors)
            winner = np.argmax(stacked, axis=0) if kind == FusorKind.MAXIMUM else np.argmin(stacked, axis=0)
            grads = [np.where(winner == i, g, 0.0) for i in range(m)]
        elif kind == FusorKind.GATING:
            y = ctx.output
            dz = g * y * (1.0 - y)
            grads = []
            for name, v in zip(names, vectors):
                W = ctx.param(name)
                grads.append(W.T @ dz)
                param_grads[name] = np.outer(dz, v)
        else:
            weights = ctx.weights
            d_weights = np.array([float(g @ v) for v in vectors])
            d_scores = weights * (d_weights - float(weights @ d_weights))
            grads = []
            for i, (name, v) in enumerate(zip(names, vectors)):
                scorer = ctx.param(name)
                grads.append(weights[i] * g + d_scores[i] * scorer)
                param_grads[name] = d_scores[i] * v
        return grads, param_grads

    @staticmethod
    def fuse_backward(kind: FusorKind, features: Sequence[np.ndarray], params: Optional[FusorParams],
                      d_out, modalities: Optional[Sequence[str]] = None
                      ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        """Recompute the forward context, then backpropagate ``d_out``"""
        _, ctx = FusionService.fuse_with_context(kind, features, params, modalities)
        return FusionService.backward_from_context(ctx, d_out)
