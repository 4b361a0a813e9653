"""
Twin models: per-modality encoders, a fusor and per-modality decoders.

A twin answers one ``TwinOp`` at a time: encode the op's sources, fuse the
present features, decode every target. The same machinery builds new twins
from existing ones (transfer, merge, split) and carries the all-to-all
``map`` objective used by the distributed mapping loop.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, DataError, DivergenceError, ReportIOError, ShapeError
from . import nn
from .fusion import FusionService, FusorKind, FusorParams
from .numerics import RngStream, mse, mse_grad, ordered_sum
from .scenario import MODALITY_ORDER, RAW_DIMS, Example, Modality, ordered_modalities

logger = logging.getLogger(__name__)

TWIN_FORMAT = "twin-model/1"


class OpKind(str, Enum):
    TRANSFER = "transfer"
    MERGE = "merge"
    SPLIT = "split"
    MAP = "map"


@dataclass(frozen=True)
class TwinOp:
    """
    One twin-to-twin operation

    transfer: one source, one other target. merge: two or more sources, one
    target outside them. split: one source, two or more targets (the source
    may be among them). map: sources equal targets.
    """

    kind: OpKind
    sources: Tuple[Modality, ...]
    targets: Tuple[Modality, ...]

    @classmethod
    def create(cls, kind, sources, targets) -> "TwinOp":
        try:
            kind = OpKind(kind)
            src = [Modality(m) for m in sources]
            tgt = [Modality(m) for m in targets]
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ConfigError("an op may not repeat a modality")
        if not src or not tgt:
            raise ConfigError("an op needs at least one source and one target")
        if kind == OpKind.TRANSFER:
            if len(src) != 1 or len(tgt) != 1 or src[0] == tgt[0]:
                raise ConfigError("transfer needs one source and one different target")
        elif kind == OpKind.MERGE:
            if len(src) < 2 or len(tgt) != 1 or tgt[0] in src:
                raise ConfigError("merge needs two or more sources and one target outside them")
        elif kind == OpKind.SPLIT:
            if len(src) != 1 or len(tgt) < 2:
                raise ConfigError("split needs one source and two or more targets")
        elif set(src) != set(tgt):
            raise ConfigError("map needs identical source and target sets")
        return cls(kind, tuple(ordered_modalities(src)), tuple(ordered_modalities(tgt)))

    @classmethod
    def parse(cls, text: str) -> "TwinOp":
        """
        Arrow notation: ``V->W`` transfer, ``V+W->S`` merge, ``S->V,W`` split,
        ``V,W,S->V,W,S`` map
        """
        if not isinstance(text, str) or text.count("->") != 1:
            raise ConfigError(f"cannot parse op {text!r}: expected one '->'")
        left, right = text.split("->")

        def names(side: str) -> List[str]:
            return [part.strip() for part in side.replace("+", ",").split(",") if part.strip()]

        src, tgt = names(left), names(right)
        if set(src) == set(tgt):
            kind = OpKind.MAP
        elif len(src) == 1 and len(tgt) == 1:
            kind = OpKind.TRANSFER
        elif len(tgt) == 1:
            kind = OpKind.MERGE
        elif len(src) == 1:
            kind = OpKind.SPLIT
        else:
            raise ConfigError(f"cannot infer op kind from {text!r}")
        return cls.create(kind, src, tgt)

    @property
    def modalities(self) -> List[Modality]:
        return ordered_modalities(self.sources + self.targets)

    def notation(self) -> str:
        return "+".join(m.value for m in self.sources) + "->" + ",".join(m.value for m in self.targets)

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind.value,
            "sources": [m.value for m in self.sources],
            "targets": [m.value for m in self.targets],
        }

    def __str__(self) -> str:
        return self.notation()


def map_op(modalities: Sequence[Modality]) -> TwinOp:
    mods = ordered_modalities(modalities)
    return TwinOp.create(OpKind.MAP, mods, mods)


@dataclass
class LossReport:
    """Per-target and per-op-kind losses; ``total`` is L_T + L_M + L_S (+ map term)"""

    per_modality: Dict[Modality, float] = field(default_factory=dict)
    transfer: float = 0.0
    merge: float = 0.0
    split: float = 0.0
    mapping: float = 0.0

    @property
    def total(self) -> float:
        return self.transfer + self.merge + self.split + self.mapping

    def add(self, kind: OpKind, modality: Modality, value: float) -> None:
        self.per_modality[modality] = self.per_modality.get(modality, 0.0) + value
        slot = {OpKind.TRANSFER: "transfer", OpKind.MERGE: "merge",
                OpKind.SPLIT: "split", OpKind.MAP: "mapping"}[kind]
        setattr(self, slot, getattr(self, slot) + value)

    def to_dict(self) -> Dict[str, float]:
        out = {f"loss_{m.value}": v for m, v in self.per_modality.items()}
        out.update({"L_T": self.transfer, "L_M": self.merge, "L_S": self.split,
                    "L_map": self.mapping, "L_UTT": self.total})
        return out


@dataclass
class PassCounter:
    encoder: int = 0
    decoder: int = 0


@dataclass
class TwinModel:
    """
    Encoders, fusor and decoders of one twin

    Parameter order: encoders (V, W, S), fusor parameters (V, W, S),
    concatenation projection, decoders (V, W, S).
    """

    encoders: Dict[Modality, nn.Network]
    decoders: Dict[Modality, nn.Network]
    fusor: FusorKind
    fusor_params: FusorParams
    latent_dim: int
    window: int
    projection: Optional[nn.Network] = None
    reconstruction_space: str = "raw"
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.fusor = FusorKind(self.fusor)
        d = self.latent_dim
        if not self.encoders or not self.decoders:
            raise ConfigError("a twin needs at least one encoder and one decoder")
        if self.reconstruction_space not in ("raw", "feature"):
            raise ConfigError(f"unknown reconstruction space: {self.reconstruction_space}")
        for m, net in self.encoders.items():
            if net.output_dim != d:
                raise ConfigError(f"encoder {m.value} emits {net.output_dim} values, latent size is {d}")
            if net.input_dim != RAW_DIMS[m] * self.window:
                raise ConfigError(f"encoder {m.value} expects {net.input_dim} inputs")
        for m, net in self.decoders.items():
            if net.input_dim != d:
                raise ConfigError(f"decoder {m.value} takes {net.input_dim} values, latent size is {d}")
            if net.output_dim != self.target_dim(m):
                raise ConfigError(f"decoder {m.value} emits {net.output_dim} values, expected {self.target_dim(m)}")
        if self.fusor == FusorKind.CONCATENATION:
            m_count = len(self.encoders)
            if self.projection is None or self.projection.input_dim != m_count * d or self.projection.output_dim != d:
                raise ConfigError(f"concatenation needs a {m_count * d} -> {d} projection")
        elif self.projection is not None:
            raise ConfigError("only concatenation twins carry a projection")
        if self.fusor.learnable:
            table = self.fusor_params.for_kind(self.fusor)
            for m in self.encoders:
                if m.value not in table:
                    raise ConfigError(f"missing {self.fusor.value} parameters for {m.value}")

    def target_dim(self, modality: Modality) -> int:
        if self.reconstruction_space == "feature":
            return self.latent_dim
        return RAW_DIMS[modality] * self.window

    @property
    def encoder_modalities(self) -> List[Modality]:
        return ordered_modalities(self.encoders.keys())

    @property
    def decoder_modalities(self) -> List[Modality]:
        return ordered_modalities(self.decoders.keys())

    def layout(self) -> List[Tuple[str, str, int, int]]:
        """(component, name, offset, size) blocks in flatten order"""
        blocks = []
        offset = 0

        def add(component: str, name: str, size: int):
            nonlocal offset
            blocks.append((component, name, offset, size))
            offset += size

        for m in self.encoder_modalities:
            add("encoder", m.value, self.encoders[m].param_count)
        table = self.fusor_params.for_kind(self.fusor)
        for m in self.encoder_modalities:
            if m.value in table:
                add("fusor", m.value, table[m.value].size)
        if self.projection is not None:
            add("projection", "concat", self.projection.param_count)
        for m in self.decoder_modalities:
            add("decoder", m.value, self.decoders[m].param_count)
        return blocks

    @property
    def param_count(self) -> int:
        return sum(size for _, _, _, size in self.layout())

    def flatten(self) -> nn.ParamVector:
        pieces = []
        table = self.fusor_params.for_kind(self.fusor)
        for component, name, _, _ in self.layout():
            if component == "encoder":
                pieces.append(nn.flatten(self.encoders[Modality(name)]))
            elif component == "fusor":
                pieces.append(table[name].reshape(-1))
            elif component == "projection":
                pieces.append(nn.flatten(self.projection))
            else:
                pieces.append(nn.flatten(self.decoders[Modality(name)]))
        return np.concatenate(pieces)

    def with_params(self, p) -> "TwinModel":
        values = np.asarray(p, dtype=np.float64).reshape(-1)
        if values.size != self.param_count:
            raise ShapeError(f"parameter vector has {values.size} entries, twin needs {self.param_count}")
        encoders, decoders = {}, {}
        projection = None
        old_table = self.fusor_params.for_kind(self.fusor)
        new_table: Dict[str, np.ndarray] = {}
        for component, name, offset, size in self.layout():
            chunk = values[offset:offset + size]
            if component == "encoder":
                encoders[Modality(name)] = nn.unflatten(self.encoders[Modality(name)], chunk)
            elif component == "fusor":
                new_table[name] = chunk.reshape(old_table[name].shape).copy()
            elif component == "projection":
                projection = nn.unflatten(self.projection, chunk)
            else:
                decoders[Modality(name)] = nn.unflatten(self.decoders[Modality(name)], chunk)
        params = FusorParams()
        if self.fusor == FusorKind.GATING:
            params.gating = new_table
        elif self.fusor == FusorKind.ATTENTION:
            params.attention = new_table
        return TwinModel(
            encoders=encoders, decoders=decoders, fusor=self.fusor, fusor_params=params,
            latent_dim=self.latent_dim, window=self.window, projection=projection,
            reconstruction_space=self.reconstruction_space, provenance=list(self.provenance),
        )


@dataclass
class _ForwardCache:
    encoder_tapes: Dict[Modality, nn.Tape]
    fuse_ctx: object
    projection_tape: Optional[nn.Tape]
    decoder_tapes: Dict[Modality, nn.Tape]
    outputs: Dict[Modality, np.ndarray]


@dataclass
class GradientReport:
    """Batch-mean objective with its gradient, split by target modality"""

    loss: float
    grad: np.ndarray
    per_target: Dict[Modality, np.ndarray]
    report: LossReport


class TwinService:

    @staticmethod
    def build_twin(modalities: Sequence[Modality], d: int, fusor: FusorKind, build, window: int,
                   rng: RngStream, targets: Optional[Sequence[Modality]] = None,
                   reconstruction_space: Optional[str] = None) -> TwinModel:
        """
        Freshly initialized twin

        Args:
            modalities: encoder modalities
            d: latent size
            fusor: fusion operator
            build: TwinBuildConfig with the layer sizes
            window: samples per example
            rng: component k draws from ``rng.fork(group, k)``
            targets: decoder modalities, defaults to ``modalities``
        """
        if d < 1:
            raise ConfigError("latent size must be >= 1")
        encoder_mods = ordered_modalities(modalities)
        decoder_mods = ordered_modalities(targets if targets is not None else modalities)
        if not encoder_mods or not decoder_mods:
            raise ConfigError("a twin needs at least one modality")
        fusor = FusorKind(fusor)
        space = reconstruction_space or build.reconstruction_space
        build = build.model_copy(update={"latent_dim": d})

        encoders = {
            m: nn.build_encoder(RAW_DIMS[m], window, build, rng.fork(0, MODALITY_ORDER.index(m)))
            for m in encoder_mods
        }
        fusor_params = FusionService.init_params(fusor, [m.value for m in encoder_mods], d, rng.fork(1))
        projection = None
        if fusor == FusorKind.CONCATENATION:
            projection = nn.Network([nn.dense(rng.fork(2), len(encoder_mods) * d, d, "identity")])
        out_dim = {m: d if space == "feature" else RAW_DIMS[m] * window for m in decoder_mods}
        decoders = {
            m: nn.build_decoder(d, out_dim[m], build, rng.fork(3, MODALITY_ORDER.index(m)))
            for m in decoder_mods
        }
        twin = TwinModel(encoders=encoders, decoders=decoders, fusor=fusor, fusor_params=fusor_params,
                         latent_dim=d, window=window, projection=projection,
                         reconstruction_space=space)
        logger.debug(f"Built {fusor.value} twin {[m.value for m in encoder_mods]} -> "
                     f"{[m.value for m in decoder_mods]} with {twin.param_count} parameters")
        return twin

    @staticmethod
    def _check_op(twin: TwinModel, example: Example, op: TwinOp) -> None:
        for m in op.sources:
            if m not in twin.encoders:
                raise ConfigError(f"twin has no encoder for source {m.value}")
            if not example.has(m):
                raise DataError(f"example (area {example.area}, start {example.start}) lacks source {m.value}")
        for m in op.targets:
            if m not in twin.decoders:
                raise ConfigError(f"twin has no decoder for target {m.value}")

    @staticmethod
    def _forward(twin: TwinModel, example: Example, op: TwinOp,
                 counter: Optional[PassCounter] = None) -> _ForwardCache:
        TwinService._check_op(twin, example, op)
        encoder_tapes = {}
        features = {}
        for m in twin.encoder_modalities:
            if m in op.sources:
                features[m], encoder_tapes[m] = nn.forward(twin.encoders[m], example.windows[m])
                if counter is not None:
                    counter.encoder += 1

        projection_tape = None
        if twin.fusor == FusorKind.CONCATENATION:
            # absent modalities keep a zero slot so the projection sees a fixed layout
            names = twin.encoder_modalities
            vectors = [features.get(m, np.zeros(twin.latent_dim)) for m in names]
            stacked, ctx = FusionService.fuse_with_context(twin.fusor, vectors, None, [m.value for m in names])
            fused, projection_tape = nn.forward(twin.projection, stacked)
        else:
            names = [m for m in twin.encoder_modalities if m in features]
            fused, ctx = FusionService.fuse_with_context(
                twin.fusor, [features[m] for m in names], twin.fusor_params, [m.value for m in names]
            )

        decoder_tapes, outputs = {}, {}
        for m in op.targets:
            outputs[m], decoder_tapes[m] = nn.forward(twin.decoders[m], fused)
            if counter is not None:
                counter.decoder += 1
        return _ForwardCache(encoder_tapes, ctx, projection_tape, decoder_tapes, outputs)

    @staticmethod
    def _backward(twin: TwinModel, cache: _ForwardCache, d_outputs: Dict[Modality, np.ndarray]) -> np.ndarray:
        """Flat gradient (``layout`` order) of the outputs' cotangents ``d_outputs``"""
        blocks = {(c, n): (o, s) for c, n, o, s in twin.layout()}
        grad = np.zeros(twin.param_count)

        d_fused = []
        for m in ordered_modalities(d_outputs.keys()):
            dx, g = nn.backward(twin.decoders[m], cache.decoder_tapes[m], d_outputs[m])
            offset, size = blocks[("decoder", m.value)]
            grad[offset:offset + size] += g
            d_fused.append(dx)
        d_fused = ordered_sum(d_fused)

        if twin.fusor == FusorKind.CONCATENATION:
            d_stacked, g = nn.backward(twin.projection, cache.projection_tape, d_fused)
            offset, size = blocks[("projection", "concat")]
            grad[offset:offset + size] += g
            feature_grads, param_grads = FusionService.backward_from_context(cache.fuse_ctx, d_stacked)
        else:
            feature_grads, param_grads = FusionService.backward_from_context(cache.fuse_ctx, d_fused)

        for name, g in param_grads.items():
            offset, size = blocks[("fusor", name)]
            grad[offset:offset + size] += g.reshape(-1)
        for name, dfeature in zip(cache.fuse_ctx.modalities, feature_grads):
            m = Modality(name)
            if m not in cache.encoder_tapes:
                continue
            _, g = nn.backward(twin.encoders[m], cache.encoder_tapes[m], dfeature)
            offset, size = blocks[("encoder", m.value)]
            grad[offset:offset + size] += g
        return grad

    @staticmethod
    def reconstruct(twin: TwinModel, example: Example, op: TwinOp,
                    counter: Optional[PassCounter] = None) -> Dict[Modality, np.ndarray]:
        """Decoded output for every target of ``op``"""
        return TwinService._forward(twin, example, op, counter).outputs

    @staticmethod
    def target_of(twin: TwinModel, example: Example, modality: Modality) -> np.ndarray:
        """Supervision for one target: the raw window, or its (constant) encoding"""
        if not example.has(modality):
            raise DataError(f"example (area {example.area}, start {example.start}) lacks target {modality.value}")
        if twin.reconstruction_space == "feature":
            if modality not in twin.encoders:
                raise ConfigError(f"feature-space targets need an encoder for {modality.value}")
            y, _ = nn.forward(twin.encoders[modality], example.windows[modality])
            return y
        return example.windows[modality]

    @staticmethod
    def _as_ops(ops: Union[TwinOp, Sequence[TwinOp]]) -> List[TwinOp]:
        if isinstance(ops, TwinOp):
            return [ops]
        ops = list(ops)
        if not ops:
            raise ConfigError("at least one op is required")
        return ops

    @staticmethod
    def op_loss(twin: TwinModel, batch: Sequence[Example], ops: Union[TwinOp, Sequence[TwinOp]]) -> LossReport:
        """
        Losses summed over the batch and the targets of every op

        Raises:
            DataError: empty batch or missing modality data
        """
        if not batch:
            raise DataError("cannot evaluate a loss on an empty batch")
        report = LossReport()
        for op in TwinService._as_ops(ops):
            for example in batch:
                outputs = TwinService.reconstruct(twin, example, op)
                for m in op.targets:
                    report.add(op.kind, m, mse(outputs[m], TwinService.target_of(twin, example, m)))
        return report

    @staticmethod
    def loss_and_grad(twin: TwinModel, batch: Sequence[Example],
                      ops: Union[TwinOp, Sequence[TwinOp]]) -> GradientReport:
        """
        Batch-mean objective and its gradient; ``per_target`` holds the
        gradient of each target modality's terms and sums to ``grad``
        """
        if not batch:
            raise DataError("cannot evaluate a loss on an empty batch")
        report = LossReport()
        sums: Dict[Modality, List[np.ndarray]] = {}
        for op in TwinService._as_ops(ops):
            for example in batch:
                cache = TwinService._forward(twin, example, op)
                for m in op.targets:
                    truth = TwinService.target_of(twin, example, m)
                    report.add(op.kind, m, mse(cache.outputs[m], truth))
                    g = TwinService._backward(twin, cache, {m: mse_grad(cache.outputs[m], truth)})
                    sums.setdefault(m, []).append(g)
        n = len(batch)
        per_target = {m: ordered_sum(sums[m]) / n for m in ordered_modalities(sums.keys())}
        grad = ordered_sum(list(per_target.values()))
        return GradientReport(loss=report.total / n, grad=grad, per_target=per_target, report=report)

    @staticmethod
    def sample_unified_ops(modalities: Sequence[Modality], rng: RngStream) -> List[TwinOp]:
        """One transfer, one merge and one split over ``modalities`` (kinds that fit only)"""
        mods = ordered_modalities(modalities)
        ops = []
        if len(mods) >= 2:
            source = rng.choice(mods)
            target = rng.choice([m for m in mods if m != source])
            ops.append(TwinOp.create(OpKind.TRANSFER, [source], [target]))
        if len(mods) >= 3:
            target = rng.choice(mods)
            ops.append(TwinOp.create(OpKind.MERGE, [m for m in mods if m != target], [target]))
        if len(mods) >= 2:
            source = rng.choice(mods)
            ops.append(TwinOp.create(OpKind.SPLIT, [source], mods))
        if not ops:
            raise ConfigError("unified training needs at least two modalities")
        return ops

    @staticmethod
    def sample_batch(examples: Sequence[Example], batch_size: int, rng: RngStream) -> List[Example]:
        """``batch_size`` draws with replacement; 0 or >= len(examples) means the full set in order"""
        if not examples:
            raise DataError("no training examples")
        if batch_size <= 0 or batch_size >= len(examples):
            return list(examples)
        picks = rng.integers(0, len(examples), batch_size)
        return [examples[int(i)] for i in picks]

    @staticmethod
    def merged_provenance(donors: Sequence[TwinModel]) -> List[str]:
        """Every donor's chain in donor order, repeated entries kept once"""
        chain: List[str] = []
        for donor in donors:
            for step in donor.provenance:
                if step not in chain:
                    chain.append(step)
        return chain

    @staticmethod
    def transform(donors: Union[TwinModel, Sequence[TwinModel]], op: TwinOp, examples: Sequence[Example],
                  cfg, build, rng: RngStream, unified: bool = False) -> Tuple[TwinModel, LossReport]:
        """
        Build a twin for ``op`` from existing twins

        The twin gets one encoder per source (targets too for feature-space
        supervision) and one fresh decoder per target. Encoders the donors
        provide are copied (first donor wins) and fine-tuned at
        ``cfg.fine_tune_scale`` times the rate, or frozen when ``cfg.fine_tune``
        is off. Every source needs a donor encoder. With ``unified`` the twin
        covers every modality of the data and each step trains one sampled
        transfer, merge and split. Steps use Adam unless ``cfg.optimizer`` is
        ``sgd``.

        Returns:
            (trained twin, loss report of ``op`` over ``examples``)
        """
        donors = [donors] if isinstance(donors, TwinModel) else list(donors)
        if not donors:
            raise ConfigError("transform needs at least one donor twin")
        d = donors[0].latent_dim
        window = donors[0].window
        for donor in donors[1:]:
            if donor.latent_dim != d:
                raise ConfigError(f"donor latent sizes differ: {donor.latent_dim} vs {d}")
            if donor.window != window:
                raise ConfigError(f"donor window lengths differ: {donor.window} vs {window}")
        if not examples:
            raise DataError("transform needs training examples")
        for m in op.sources:
            if not any(m in donor.encoders for donor in donors):
                raise ConfigError(f"no donor provides an encoder for source {m.value}")

        data_mods = ordered_modalities(examples[0].windows.keys())
        space = donors[0].reconstruction_space
        if unified:
            sources, targets = data_mods, data_mods
        else:
            # feature-space supervision encodes the targets too
            sources = op.modalities if space == "feature" else list(op.sources)
            targets = list(op.targets)
        fusor = donors[0].fusor
        twin = TwinService.build_twin(sources, d, fusor, build, window, rng.fork(0),
                                      targets=targets, reconstruction_space=space)

        encoders = dict(twin.encoders)
        donated = set()
        table = twin.fusor_params.for_kind(fusor)
        for m in twin.encoder_modalities:
            for donor in donors:
                if m in donor.encoders:
                    encoders[m] = nn.unflatten(donor.encoders[m], nn.flatten(donor.encoders[m]))
                    donated.add(m)
                    donor_table = donor.fusor_params.for_kind(fusor) if donor.fusor == fusor else {}
                    if m.value in donor_table:
                        table[m.value] = donor_table[m.value].copy()
                    break
        twin.encoders = encoders
        twin.provenance = TwinService.merged_provenance(donors) + [op.notation()]

        scale = np.ones(twin.param_count)
        encoder_rate = cfg.fine_tune_scale if cfg.fine_tune else 0.0
        for component, name, offset, size in twin.layout():
            if component == "encoder" and Modality(name) in donated:
                scale[offset:offset + size] = encoder_rate
        rates = cfg.lr * scale

        params = twin.flatten()
        adam = nn.Adam(params.size, rates) if cfg.optimizer == "adam" else None
        train_rng = rng.fork(1)
        for step in range(cfg.steps):
            batch = TwinService.sample_batch(examples, cfg.batch_size, train_rng)
            ops = TwinService.sample_unified_ops(data_mods, train_rng) if unified else [op]
            result = TwinService.loss_and_grad(twin.with_params(params), batch, ops)
            if not np.isfinite(result.loss) or not np.all(np.isfinite(result.grad)):
                raise DivergenceError(f"transform {op.notation()} diverged at step {step}",
                                      step=step, loss=result.loss)
            params = adam.step(params, result.grad) if adam is not None else nn.sgd_step(params, result.grad, rates)
            if step % 50 == 0:
                logger.debug(f"transform {op.notation()} step {step}: loss {result.loss:.6g}")
        twin = twin.with_params(params)
        report = TwinService.op_loss(twin, examples, op)
        logger.info(f"Transform {op.notation()} ({fusor.value}, {'unified' if unified else 'specific'}): "
                    f"L={report.total / len(examples):.6g} per example")
        return twin, report

    @staticmethod
    def save_twin(twin: TwinModel, directory: str) -> str:
        """One nn checkpoint per network plus ``twin.json``; returns the manifest path"""
        components = {}
        for m in twin.encoder_modalities:
            components[f"encoder_{m.value}"] = nn.save_network(
                twin.encoders[m], os.path.join(directory, f"encoder_{m.value}.json"))
        for m in twin.decoder_modalities:
            components[f"decoder_{m.value}"] = nn.save_network(
                twin.decoders[m], os.path.join(directory, f"decoder_{m.value}.json"))
        if twin.projection is not None:
            components["projection"] = nn.save_network(twin.projection, os.path.join(directory, "projection.json"))
        manifest = {
            "format": TWIN_FORMAT,
            "encoders": [m.value for m in twin.encoder_modalities],
            "decoders": [m.value for m in twin.decoder_modalities],
            "latent_dim": twin.latent_dim,
            "window": twin.window,
            "fusor": twin.fusor.value,
            "reconstruction_space": twin.reconstruction_space,
            "provenance": twin.provenance,
            "fusor_params": {
                name: {"shape": list(v.shape), "values": [float(x) for x in v.reshape(-1)]}
                for name, v in twin.fusor_params.for_kind(twin.fusor).items()
            },
            "components": {k: os.path.basename(v) for k, v in components.items()},
        }
        path = os.path.join(directory, "twin.json")
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2)
        except OSError as e:
            raise ReportIOError(f"cannot write twin manifest: {e}", path=path) from e
        return path

    @staticmethod
    def load_twin(directory: str) -> TwinModel:
        path = os.path.join(directory, "twin.json")
        try:
            with open(path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except OSError as e:
            raise ReportIOError(f"cannot read twin manifest: {e}", path=path) from e
        if manifest.get("format") != TWIN_FORMAT:
            raise ConfigError(f"unsupported twin format: {manifest.get('format')}")
        files = manifest["components"]

        def network(key: str) -> nn.Network:
            return nn.load_network(os.path.join(directory, files[key]))

        fusor = FusorKind(manifest["fusor"])
        table = {
            name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in manifest["fusor_params"].items()
        }
        params = FusorParams()
        if fusor == FusorKind.GATING:
            params.gating = table
        elif fusor == FusorKind.ATTENTION:
            params.attention = table
        return TwinModel(
            encoders={Modality(m): network(f"encoder_{m}") for m in manifest["encoders"]},
            decoders={Modality(m): network(f"decoder_{m}") for m in manifest["decoders"]},
            fusor=fusor,
            fusor_params=params,
            latent_dim=manifest["latent_dim"],
            window=manifest["window"],
            projection=network("projection") if "projection" in files else None,
            reconstruction_space=manifest["reconstruction_space"],
            provenance=list(manifest["provenance"]),
        )
