"""Dataset generation, feature extraction, noise injection, and persistence.

One sample = one simulation: the detector's three decimated field series
(Ez, Hx, Hy, 95 samples each) concatenated into a 285-long feature vector,
labeled with the paper-frame centimeter coordinates of the target center(s).
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field, replace

import numpy as np

from . import scene as scene_mod
from .container import read_container, sha256_json, write_container
from .em_core import DEFAULT_COURANT, SourceSpec, make_grid, run_simulation

FEATURES_PER_SERIES = 95
FEATURE_LENGTH = 3 * FEATURES_PER_SERIES
SPLITS = ("train", "test", "val")
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)
STD_FLOOR = 1e-12

_DATASET_MAGIC = b"TWRD"


class GenerationError(RuntimeError):
    """Dataset generation aborted (a simulation failed)."""


class DatasetLoadError(ValueError):
    """Dataset file unreadable or inconsistent."""


@dataclass(frozen=True)
class GenerationConfig:
    """Fully resolved sweep configuration; defaults match the study setup."""

    scenarios: tuple[str, ...] = scene_mod.SCENARIOS
    n_targets: int = 1
    master_seed: int = 0
    domain_m: float = scene_mod.DOMAIN_SIZE
    frequency_hz: float = 3e9
    courant: float = DEFAULT_COURANT
    pml_cells: int = 10
    source_y: float = scene_mod.SOURCE_Y
    source_amplitude: float = 1.0
    ramp_periods: float = 2.0
    detector_xy: tuple[float, float] = scene_mod.DETECTOR_XY
    total_steps: int = 2375
    sample_stride: int = 25
    x_range_cm: tuple[float, float] = (5.0, 85.0)
    y_range_cm: tuple[float, float] = (40.0, 100.0)
    step_cm: float = 10.0
    pair_count: int = 756
    min_separation_cm: float = 30.0
    target_sizes_m: tuple[float, ...] = scene_mod.TARGET_SIZES_M
    target_eps_r: float = scene_mod.TARGET_EPS_R
    homogeneous_eps: float = scene_mod.HOMOGENEOUS_EPS
    frame_offset_m: tuple[float, float] = scene_mod.FRAME_OFFSET

    def to_dict(self) -> dict:
        return {
            "scenarios": list(self.scenarios),
            "n_targets": self.n_targets,
            "master_seed": self.master_seed,
            "domain_m": self.domain_m,
            "frequency_hz": self.frequency_hz,
            "courant": self.courant,
            "pml_cells": self.pml_cells,
            "source_y": self.source_y,
            "source_amplitude": self.source_amplitude,
            "ramp_periods": self.ramp_periods,
            "detector_xy": list(self.detector_xy),
            "total_steps": self.total_steps,
            "sample_stride": self.sample_stride,
            "x_range_cm": list(self.x_range_cm),
            "y_range_cm": list(self.y_range_cm),
            "step_cm": self.step_cm,
            "pair_count": self.pair_count,
            "min_separation_cm": self.min_separation_cm,
            "target_sizes_m": list(self.target_sizes_m),
            "target_eps_r": self.target_eps_r,
            "homogeneous_eps": self.homogeneous_eps,
            "frame_offset_m": list(self.frame_offset_m),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("scenarios", "target_sizes_m"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("detector_xy", "x_range_cm", "y_range_cm", "frame_offset_m"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        return sha256_json(self.to_dict())


@dataclass
class Sample:
    features: np.ndarray            # (285,)
    labels: np.ndarray              # (2,) or (4,), paper-frame cm
    scenario: str
    sizes: tuple[float, ...]        # edge lengths in meters, one per target
    sim_seed: int


@dataclass
class Dataset:
    samples: list[Sample]
    metadata: dict
    split_assignment: list[str | None] = field(default_factory=list)
    standardization: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not self.split_assignment:
            self.split_assignment = [None] * len(self.samples)
        if len(self.split_assignment) != len(self.samples):
            raise ValueError("split_assignment length must match sample count")

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_labels(self) -> int:
        return len(self.samples[0].labels) if self.samples else 0

    def features_matrix(self) -> np.ndarray:
        return np.array([s.features for s in self.samples])

    def labels_matrix(self) -> np.ndarray:
        return np.array([s.labels for s in self.samples])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.split_assignment) if s == split], dtype=int)

    def split_arrays(self, split: str, standardized: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(features, labels) for a split; features standardized when stats exist."""
        idx = self.split_indices(split)
        feats = self.features_matrix()[idx] if len(idx) else np.empty((0, FEATURE_LENGTH))
        labels = self.labels_matrix()[idx] if len(idx) else np.empty((0, self.n_labels))
        if standardized and self.standardization is not None and len(idx):
            feats = apply_standardizer(feats, self.standardization)
        return feats, labels


def _sample_seed(config: GenerationConfig, scenario_index: int, sample_index: int) -> np.random.SeedSequence:
    # Counter-based derivation: independent of generation order and worker count.
    return np.random.SeedSequence(
        entropy=(config.master_seed, scenario_index, config.n_targets, sample_index)
    )


def build_placements(config: GenerationConfig) -> list[dict]:
    """Deterministic generation plan: one entry per pending simulation."""
    if config.n_targets not in (1, 2):
        raise ValueError("n_targets must be 1 or 2")
    plan = []
    for scen_index, scenario in enumerate(config.scenarios):
        wall = scene_mod.wall_for_scenario(scenario, config.homogeneous_eps)
        positions = scene_mod.enumerate_single_positions(
            config.x_range_cm, config.y_range_cm, config.step_cm)
        if config.n_targets == 1:
            placements = [(p,) for p in positions]
        else:
            pair_seed = int(np.random.SeedSequence(
                entropy=(config.master_seed, scen_index, 2)).generate_state(1)[0])
            placements = scene_mod.enumerate_pairs(
                positions, config.pair_count, pair_seed, config.min_separation_cm)
        for sample_index, centers in enumerate(placements):
            ss = _sample_seed(config, scen_index, sample_index)
            rng = np.random.default_rng(ss)
            sizes = []
            for center in centers:
                valid = scene_mod.valid_target_sizes(
                    center, wall, config.target_sizes_m,
                    config.frame_offset_m, config.domain_m)
                if not valid:
                    raise GenerationError(
                        f"no admissible target size at {center} cm for scenario {scenario}")
                sizes.append(float(rng.choice(np.asarray(valid))))
            plan.append({
                "scenario": scenario,
                "centers": tuple(tuple(c) for c in centers),
                "sizes": tuple(sizes),
                "sim_seed": int(ss.generate_state(1)[0]),
            })
    return plan


def _simulate_placement(args) -> np.ndarray:
    config, entry = args
    wall = scene_mod.wall_for_scenario(entry["scenario"], config.homogeneous_eps)
    targets = tuple(
        scene_mod.TargetSpec(center, size, config.target_eps_r)
        for center, size in zip(entry["centers"], entry["sizes"])
    )
    scn = scene_mod.Scene(wall=wall, targets=targets, frame_offset=config.frame_offset_m)
    grid = make_grid(config.domain_m, config.frequency_hz, config.courant, config.pml_cells)
    src = SourceSpec(config.frequency_hz, config.source_y,
                     config.source_amplitude, config.ramp_periods)
    try:
        record = run_simulation(scn, grid, src, config.detector_xy,
                                config.total_steps, config.sample_stride)
    except Exception as exc:
        raise GenerationError(
            f"simulation failed for scenario {entry['scenario']} "
            f"targets {entry['centers']}: {exc}"
        ) from exc
    return extract_features(record)


def generate_dataset(config: GenerationConfig, workers: int = 1, progress=None) -> Dataset:
    """Run one simulation per placement and assemble the labeled dataset.

    Deterministic given ``config``: results are ordered by the generation
    plan regardless of ``workers``. ``progress`` is an optional callable
    invoked as progress(done, total).
    """
    plan = build_placements(config)
    jobs = [(config, entry) for entry in plan]
    features = []
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            for k, feat in enumerate(pool.imap(_simulate_placement, jobs, chunksize=1)):
                features.append(feat)
                if progress:
                    progress(k + 1, len(jobs))
    else:
        for k, job in enumerate(jobs):
            features.append(_simulate_placement(job))
            if progress:
                progress(k + 1, len(jobs))
    samples = []
    for entry, feat in zip(plan, features):
        labels = np.array([c for center in entry["centers"] for c in center], dtype=float)
        samples.append(Sample(
            features=feat,
            labels=labels,
            scenario=entry["scenario"],
            sizes=entry["sizes"],
            sim_seed=entry["sim_seed"],
        ))
    metadata = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "n_samples": len(samples),
        "samples_per_scenario": len(samples) // max(len(config.scenarios), 1),
    }
    return Dataset(samples=samples, metadata=metadata)


def extract_features(record) -> np.ndarray:
    """Concatenate the probe series as Ez(95) || Hx(95) || Hy(95)."""
    series = (record.ez_series, record.hx_series, record.hy_series)
    for s in series:
        if len(s) != FEATURES_PER_SERIES:
            raise ValueError(
                f"probe series length {len(s)} != {FEATURES_PER_SERIES}; "
                "adjust total_steps/sample_stride"
            )
    features = np.concatenate([np.asarray(s, dtype=float) for s in series])
    if not np.all(np.isfinite(features)):
        raise ValueError("probe record contains non-finite values")
    return features


def add_awgn(features: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add white Gaussian noise at the requested SNR relative to mean power."""
    features = np.asarray(features, dtype=float)
    p_signal = float(np.mean(features ** 2))
    if p_signal == 0.0:
        raise ValueError("cannot add noise to an identically zero feature vector")
    sigma = math.sqrt(p_signal * 10.0 ** (-snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return features + sigma * rng.standard_normal(features.shape)


def with_awgn(ds: Dataset, snr_db: float, seed: int) -> Dataset:
    """Noisy copy of a dataset: independent per-sample noise, stats cleared.

    Splits are preserved; the standardizer must be re-fit on the noisy
    train split before training.
    """
    noisy = []
    for i, s in enumerate(ds.samples):
        per_sample = np.random.SeedSequence(entropy=(seed, i))
        noisy.append(replace(s, features=add_awgn(s.features, snr_db, per_sample)))
    metadata = dict(ds.metadata)
    metadata["awgn"] = {"snr_db": snr_db, "seed": seed}
    return Dataset(samples=noisy, metadata=metadata,
                   split_assignment=list(ds.split_assignment), standardization=None)


def split_dataset(ds: Dataset, fractions=SPLIT_FRACTIONS, seed: int = 0) -> Dataset:
    """Assign train/test/val tags by seeded shuffle.

    fractions = (train, test, val); test and val counts are floors of their
    fractions, the remainder goes to train.
    """
    if not math.isclose(sum(fractions), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("split fractions must sum to 1")
    n = ds.n_samples
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_test = int(math.floor(fractions[1] * n))
    n_val = int(math.floor(fractions[2] * n))
    perm = np.random.default_rng(seed).permutation(n)
    assignment: list[str | None] = [None] * n
    for i in perm[:n_test]:
        assignment[i] = "test"
    for i in perm[n_test:n_test + n_val]:
        assignment[i] = "val"
    for i in perm[n_test + n_val:]:
        assignment[i] = "train"
    metadata = dict(ds.metadata)
    metadata["split"] = {"fractions": list(fractions), "seed": seed,
                         "counts": {"train": n - n_test - n_val, "test": n_test, "val": n_val}}
    return Dataset(samples=ds.samples, metadata=metadata,
                   split_assignment=assignment, standardization=ds.standardization)


def fit_standardizer(train_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std over train rows; std floored at 1e-12."""
    train_features = np.asarray(train_features, dtype=float)
    if train_features.ndim != 2 or train_features.shape[0] < 2:
        raise ValueError("need a 2D matrix with at least 2 training rows")
    mean = train_features.mean(axis=0)
    std = np.maximum(train_features.std(axis=0), STD_FLOOR)
    return mean, std


def apply_standardizer(features: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    return (np.asarray(features, dtype=float) - mean) / std


def invert_standardizer(features: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    return np.asarray(features, dtype=float) * std + mean


def with_standardization(ds: Dataset) -> Dataset:
    """Fit the standardizer on the train split and attach it."""
    feats, _ = ds.split_arrays("train", standardized=False)
    stats = fit_standardizer(feats)
    return Dataset(samples=ds.samples, metadata=dict(ds.metadata),
                   split_assignment=list(ds.split_assignment), standardization=stats)


def save_dataset(ds: Dataset, path) -> None:
    """Lossless single-file persistence (see container module for layout)."""
    n = ds.n_samples
    header = {
        "kind": "dataset",
        "n_samples": n,
        "n_features": FEATURE_LENGTH,
        "n_labels": ds.n_labels,
        "scenarios": [s.scenario for s in ds.samples],
        "sizes": [list(s.sizes) for s in ds.samples],
        "sim_seeds": [s.sim_seed for s in ds.samples],
        "splits": list(ds.split_assignment),
        "has_standardization": ds.standardization is not None,
        "metadata": ds.metadata,
    }
    arrays = [
        ("features", ds.features_matrix() if n else np.empty((0, FEATURE_LENGTH))),
        ("labels", ds.labels_matrix() if n else np.empty((0, 0))),
    ]
    if ds.standardization is not None:
        arrays.append(("std_mean", ds.standardization[0]))
        arrays.append(("std_std", ds.standardization[1]))
    write_container(path, _DATASET_MAGIC, header, arrays)


def load_dataset(path) -> Dataset:
    try:
        header, arrays = read_container(path, _DATASET_MAGIC)
    except ValueError as exc:
        raise DatasetLoadError(str(exc)) from exc
    if header.get("kind") != "dataset":
        raise DatasetLoadError(f"{path}: not a dataset container")
    n = header["n_samples"]
    features = arrays["features"]
    labels = arrays["labels"]
    if features.shape[0] != n or labels.shape[0] != n:
        raise DatasetLoadError(f"{path}: array row counts disagree with header")
    samples = [
        Sample(
            features=features[i],
            labels=labels[i],
            scenario=header["scenarios"][i],
            sizes=tuple(header["sizes"][i]),
            sim_seed=header["sim_seeds"][i],
        )
        for i in range(n)
    ]
    standardization = None
    if header.get("has_standardization"):
        standardization = (arrays["std_mean"], arrays["std_std"])
    return Dataset(samples=samples, metadata=header["metadata"],
                   split_assignment=list(header["splits"]), standardization=standardization)


def export_csv(ds: Dataset, path) -> None:
    """Inspection CSV: scenario, n_targets, labels, sizes, f0..f284.

    Splits and standardization stats stay in the binary container only.
    """
    n_targets = ds.n_labels // 2
    label_cols = [f"{axis}{k + 1}" for k in range(n_targets) for axis in ("x", "y")]
    size_cols = [f"size{k + 1}" for k in range(n_targets)]
    feat_cols = [f"f{i}" for i in range(FEATURE_LENGTH)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["scenario", "n_targets"] + label_cols + size_cols + feat_cols) + "\n")
        for s in ds.samples:
            row = [s.scenario, str(n_targets)]
            row += [repr(float(v)) for v in s.labels]
            row += [repr(float(v)) for v in s.sizes]
            row += [repr(float(v)) for v in s.features]
            fh.write(",".join(row) + "\n")


def import_csv(path) -> Dataset:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.readline().strip().split(",")
        if not head or head[0] != "scenario":
            raise DatasetLoadError(f"{path}: unexpected CSV header")
        for line in fh:
            parts = line.strip().split(",")
            scenario = parts[0]
            n_targets = int(parts[1])
            off = 2
            labels = np.array([float(v) for v in parts[off:off + 2 * n_targets]])
            off += 2 * n_targets
            sizes = tuple(float(v) for v in parts[off:off + n_targets])
            off += n_targets
            features = np.array([float(v) for v in parts[off:]])
            if len(features) != FEATURE_LENGTH:
                raise DatasetLoadError(f"{path}: row has {len(features)} feature columns")
            samples.append(Sample(features, labels, scenario, sizes, sim_seed=0))
    return Dataset(samples=samples, metadata={"source": "csv"})
