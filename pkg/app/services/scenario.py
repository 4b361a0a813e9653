"""
Synthetic multi-area world and the CSV ingestion path.

Three aligned modalities are derived from one latent 2-D walk per area:
visual (noisy position in the area camera frame), wireless (range and RSSI to
the area's access point) and sensory (discrete acceleration and heading rate).
The walker loops around the frame origin, so its acceleration points back at
where it is and every modality carries the position.
"""
import glob
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from ..errors import AlignmentError, DataError, EmptyDatasetError, ParseError, ReportIOError, ShapeError
from .numerics import RngStream

if TYPE_CHECKING:
    from ..config import WorldConfig

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    V = "V"
    W = "W"
    S = "S"


MODALITY_ORDER: Tuple[Modality, ...] = (Modality.V, Modality.W, Modality.S)
RAW_DIMS: Dict[Modality, int] = {Modality.V: 2, Modality.W: 2, Modality.S: 3}
MODALITY_COLUMNS: Dict[Modality, List[str]] = {
    Modality.V: ["V_x", "V_y"],
    Modality.W: ["W_range", "W_rssi"],
    Modality.S: ["S_ax", "S_ay", "S_turn"],
}
LATENT_COLUMNS = ["latent_x", "latent_y"]
INDEX_COLUMNS = ["area", "step", "timestamp"]
CSV_COLUMNS = INDEX_COLUMNS + [c for m in MODALITY_ORDER for c in MODALITY_COLUMNS[m]] + LATENT_COLUMNS

SAMPLE_PERIOD = 0.1
BURN_IN = 2
REVERSION = 0.98
FLOAT_FORMAT = "%.17g"


def ordered_modalities(modalities) -> List[Modality]:
    """Modalities in canonical V, W, S order, duplicates dropped"""
    wanted = {Modality(m) for m in modalities}
    return [m for m in MODALITY_ORDER if m in wanted]


def rssi_from_range(distance: np.ndarray) -> np.ndarray:
    return -40.0 - 20.0 * np.log10(np.maximum(distance, 0.1))


def range_from_rssi(rssi: np.ndarray) -> np.ndarray:
    """Inverse of ``rssi_from_range`` above the 0.1 clipping distance"""
    return 10.0 ** ((-40.0 - np.asarray(rssi, dtype=np.float64)) / 20.0)


def wrap_angle(angle: np.ndarray) -> np.ndarray:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class AreaData:
    """One local area: aligned per-modality samples and the latent walk"""

    area: int
    timestamps: np.ndarray
    samples: Dict[Modality, np.ndarray]
    latent: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return int(self.timestamps.size)

    @property
    def modalities(self) -> List[Modality]:
        return ordered_modalities(self.samples.keys())

    def slice(self, start: int, stop: int) -> "AreaData":
        return AreaData(
            area=self.area,
            timestamps=self.timestamps[start:stop].copy(),
            samples={m: v[start:stop].copy() for m, v in self.samples.items()},
            latent=None if self.latent is None else self.latent[start:stop].copy(),
        )


@dataclass
class Example:
    """
    One training example: per-modality flat windows

    Each window is channel-major, ``raw_dim`` channels of ``w`` samples,
    so entry ``c * w + t`` is channel c at window offset t.
    """

    area: int
    start: int
    windows: Dict[Modality, np.ndarray]

    def has(self, modality: Modality) -> bool:
        return modality in self.windows


@dataclass
class MultiModalDataset:
    areas: List[AreaData]
    seed: Optional[int] = None
    scalers: Dict[Modality, StandardScaler] = field(default_factory=dict)

    @property
    def modalities(self) -> List[Modality]:
        """Modalities present in every area"""
        if not self.areas:
            return []
        present = set(MODALITY_ORDER)
        for area in self.areas:
            present &= set(area.samples.keys())
        return ordered_modalities(present)

    @property
    def has_latent(self) -> bool:
        return bool(self.areas) and all(a.latent is not None for a in self.areas)

    @property
    def total_steps(self) -> int:
        return sum(a.steps for a in self.areas)

    def raw_bytes(self) -> int:
        """Bytes needed to ship every modality sample once (8 per value)"""
        total = 0
        for area in self.areas:
            for values in area.samples.values():
                total += values.size * 8
        return total


class ScenarioService:
    """World generation, windowing, standardization and CSV I/O"""

    @staticmethod
    def generate_world(cfg: "WorldConfig") -> MultiModalDataset:
        """
        Build one seeded dataset with ``cfg.areas`` independent areas

        Area i draws from its own stream: ``RngStream(seed, (i,))``, or
        ``RngStream(area_seeds[i], (i,))`` when per-area seeds are given.
        """
        areas = []
        for i in range(cfg.areas):
            seed = cfg.area_seeds[i] if cfg.area_seeds is not None else cfg.seed
            areas.append(ScenarioService._generate_area(cfg, i, RngStream(seed, (i,))))
        logger.info(f"Generated world: {cfg.areas} areas x {cfg.steps_per_area} steps (seed {cfg.seed})")
        return MultiModalDataset(areas=areas, seed=cfg.seed)

    @staticmethod
    def _generate_area(cfg: "WorldConfig", index: int, rng: RngStream) -> AreaData:
        steps = cfg.steps_per_area
        ap = np.array(cfg.ap_position(index), dtype=np.float64)

        # radius and turn rate take Gaussian steps, pulled back toward the loop
        walk_rng = rng.fork(0)
        total = steps + BURN_IN
        phase0 = walk_rng.uniform(-math.pi, math.pi)
        kicks = walk_rng.normal(cfg.walk_step_std, (total, 2))
        radius = np.empty(total)
        rate = np.empty(total)
        r, omega = cfg.loop_radius, cfg.turn_rate
        for t in range(total):
            r = cfg.loop_radius + REVERSION * (r - cfg.loop_radius) + kicks[t, 0]
            omega = cfg.turn_rate + REVERSION * (omega - cfg.turn_rate) + kicks[t, 1] / cfg.loop_radius
            radius[t] = r
            rate[t] = omega
        phase = phase0 + np.cumsum(rate)
        path = np.column_stack([radius * np.cos(phase), radius * np.sin(phase)])
        latent = path[BURN_IN:]

        velocity = np.diff(path, axis=0)
        heading = np.arctan2(velocity[:, 1], velocity[:, 0])
        accel = path[2:] - 2.0 * path[1:-1] + path[:-2]
        turn = wrap_angle(np.diff(heading))

        distance = np.linalg.norm(latent - ap, axis=1)
        samples = {
            Modality.V: latent.copy(),
            Modality.W: np.column_stack([distance, rssi_from_range(distance)]),
            Modality.S: np.column_stack([accel, turn]),
        }
        for k, modality in enumerate(MODALITY_ORDER):
            std = cfg.noise_for(modality)
            if std > 0:
                samples[modality] = samples[modality] + rng.fork(1 + k).normal(std, samples[modality].shape)

        timestamps = np.arange(steps, dtype=np.float64) * SAMPLE_PERIOD
        return AreaData(area=index, timestamps=timestamps, samples=samples, latent=latent)

    @staticmethod
    def window(ds: MultiModalDataset, w: int, modalities: Optional[Sequence[Modality]] = None) -> List[Example]:
        """
        Overlapping windows of ``w`` steps, area by area, start by start

        Raises:
            ShapeError: when ``w`` < 1 or exceeds an area's length
        """
        if w < 1:
            raise ShapeError("window length must be >= 1")
        wanted = ordered_modalities(modalities) if modalities is not None else ds.modalities
        examples = []
        for area in ds.areas:
            if w > area.steps:
                raise ShapeError(f"window {w} exceeds the {area.steps} steps of area {area.area}")
            missing = [m.value for m in wanted if m not in area.samples]
            if missing:
                raise DataError(f"area {area.area} has no samples for {missing}")
            for start in range(area.steps - w + 1):
                windows = {
                    m: np.ascontiguousarray(area.samples[m][start:start + w].T).reshape(-1)
                    for m in wanted
                }
                examples.append(Example(area=area.area, start=start, windows=windows))
        return examples

    @staticmethod
    def split_area(area: AreaData, train_fraction: float) -> Tuple[AreaData, AreaData]:
        """
        Time split: the first ``train_fraction`` of steps train, the rest is held out

        With ``train_fraction`` = 1 the held-out part is the training part.
        """
        cut = max(1, int(math.floor(area.steps * train_fraction)))
        if cut >= area.steps:
            return area, area
        return area.slice(0, cut), area.slice(cut, area.steps)

    @staticmethod
    def split_dataset(ds: MultiModalDataset, train_fraction: float) -> Tuple[MultiModalDataset, MultiModalDataset]:
        train, held_out = [], []
        for area in ds.areas:
            a, b = ScenarioService.split_area(area, train_fraction)
            train.append(a)
            held_out.append(b)
        return replace(ds, areas=train), replace(ds, areas=held_out)

    @staticmethod
    def fit_standardization(ds: MultiModalDataset) -> Dict[Modality, StandardScaler]:
        """One scaler per modality, fitted on every area's samples in area order"""
        if not ds.areas:
            raise EmptyDatasetError("cannot fit standardization on an empty dataset")
        scalers = {}
        for modality in ds.modalities:
            stacked = np.vstack([area.samples[modality] for area in ds.areas])
            scalers[modality] = StandardScaler().fit(stacked)
        return scalers

    @staticmethod
    def standardize(ds: MultiModalDataset, scalers: Dict[Modality, StandardScaler]) -> MultiModalDataset:
        areas = []
        for area in ds.areas:
            samples = {
                m: scalers[m].transform(v) if m in scalers else v.copy()
                for m, v in area.samples.items()
            }
            areas.append(AreaData(area=area.area, timestamps=area.timestamps.copy(),
                                  samples=samples, latent=area.latent))
        return MultiModalDataset(areas=areas, seed=ds.seed, scalers=dict(scalers))

    @staticmethod
    def area_frame(area: AreaData) -> pd.DataFrame:
        data = {
            "area": np.full(area.steps, area.area, dtype=np.int64),
            "step": np.arange(area.steps, dtype=np.int64),
            "timestamp": area.timestamps,
        }
        for modality in area.modalities:
            for c, column in enumerate(MODALITY_COLUMNS[modality]):
                data[column] = area.samples[modality][:, c]
        if area.latent is not None:
            data["latent_x"] = area.latent[:, 0]
            data["latent_y"] = area.latent[:, 1]
        return pd.DataFrame(data)

    @staticmethod
    def export_csv(ds: MultiModalDataset, out_dir: str) -> List[str]:
        """Write ``area_<i>.csv`` per area; returns the paths in area order"""
        paths = []
        try:
            os.makedirs(out_dir, exist_ok=True)
            for area in ds.areas:
                path = os.path.join(out_dir, f"area_{area.area}.csv")
                ScenarioService.area_frame(area).to_csv(
                    path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
                )
                paths.append(path)
        except OSError as e:
            raise ReportIOError(f"cannot write dataset: {e}", path=out_dir) from e
        logger.info(f"Exported {len(paths)} area files to {out_dir}")
        return paths

    @staticmethod
    def load_csv(path: str) -> MultiModalDataset:
        """
        Read one CSV file holding one or more areas

        Raises:
            ParseError: malformed header or non-numeric cell (with file line number)
            AlignmentError: empty cell, or steps/timestamps out of order within an area
            EmptyDatasetError: header without data rows
        """
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        except FileNotFoundError as e:
            raise ReportIOError("dataset file not found", path=path) from e
        except pd.errors.EmptyDataError as e:
            raise EmptyDatasetError(f"{path} is empty") from e
        except pd.errors.ParserError as e:
            raise ParseError(f"{path}: {e}") from e

        columns = [c.strip() for c in frame.columns]
        frame.columns = columns
        missing = [c for c in INDEX_COLUMNS if c not in columns]
        if missing:
            raise ParseError(f"missing columns {missing}", line=1)
        unknown = [c for c in columns if c not in CSV_COLUMNS]
        if unknown:
            raise ParseError(f"unknown columns {unknown}", line=1)
        modalities = []
        for modality in MODALITY_ORDER:
            have = [c in columns for c in MODALITY_COLUMNS[modality]]
            if all(have):
                modalities.append(modality)
            elif any(have):
                raise ParseError(f"modality {modality.value} has only some of its columns", line=1)
        if not modalities:
            raise ParseError("no modality columns present", line=1)
        has_latent = all(c in columns for c in LATENT_COLUMNS)
        if frame.empty:
            raise EmptyDatasetError(f"{path} has a header but no data rows")

        wanted = INDEX_COLUMNS + [c for m in modalities for c in MODALITY_COLUMNS[m]]
        if has_latent:
            wanted += LATENT_COLUMNS
        values = np.empty((len(frame), len(wanted)), dtype=np.float64)
        for idx, row in enumerate(frame[wanted].itertuples(index=False)):
            line = idx + 2
            for j, cell in enumerate(row):
                text = cell.strip()
                if text == "":
                    raise AlignmentError(f"line {line}: column {wanted[j]} is empty")
                try:
                    values[idx, j] = float(text)
                except ValueError:
                    raise ParseError(f"column {wanted[j]} is not numeric: {text!r}", line=line)
            if not np.all(np.isfinite(values[idx])):
                raise ParseError("non-finite value", line=line)

        table = pd.DataFrame(values, columns=wanted)
        areas = []
        for area_id, rows in table.groupby("area", sort=True):
            areas.append(ScenarioService._area_from_rows(int(area_id), rows, modalities, has_latent))
        logger.info(f"Loaded {len(areas)} areas from {path}")
        return MultiModalDataset(areas=areas)

    @staticmethod
    def _area_from_rows(area_id: int, rows: pd.DataFrame, modalities: List[Modality],
                        has_latent: bool) -> AreaData:
        steps = rows["step"].to_numpy()
        if not np.array_equal(steps, np.arange(len(rows), dtype=np.float64)):
            raise AlignmentError(f"area {area_id}: steps must run 0, 1, 2, ... in file order")
        timestamps = rows["timestamp"].to_numpy().copy()
        if timestamps.size > 1 and np.any(np.diff(timestamps) <= 0):
            raise AlignmentError(f"area {area_id}: timestamps are not strictly increasing")
        samples = {m: rows[MODALITY_COLUMNS[m]].to_numpy().copy() for m in modalities}
        latent = rows[LATENT_COLUMNS].to_numpy().copy() if has_latent else None
        return AreaData(area=area_id, timestamps=timestamps, samples=samples, latent=latent)

    @staticmethod
    def load_dataset_dir(directory: str) -> MultiModalDataset:
        """Merge every ``area_<i>.csv`` of a directory, ordered by area id"""
        pattern = re.compile(r"area_(\d+)\.csv$")
        found = []
        for path in glob.glob(os.path.join(directory, "area_*.csv")):
            match = pattern.search(os.path.basename(path))
            if match:
                found.append((int(match.group(1)), path))
        if not found:
            raise EmptyDatasetError(f"no area_<i>.csv files in {directory}")
        areas: List[AreaData] = []
        for _, path in sorted(found):
            areas.extend(ScenarioService.load_csv(path).areas)
        ids = [a.area for a in areas]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate area ids in {directory}: {ids}")
        return MultiModalDataset(areas=areas)
