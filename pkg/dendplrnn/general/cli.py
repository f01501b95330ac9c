from dataclasses import dataclass, field, fields, replace
from pathlib import Path
import argparse
import copy
import json
import logging
import sys

import numpy as np
import regex as re

from dendplrnn.analysis.fixed_points import (
    count_theoretical_regions,
    find_fixed_points,
    k_cycles,
    region_census,
)
from dendplrnn.analysis.vector_field import (
    FieldGrid,
    field_sign_agreement,
    ground_truth_field,
    vector_field,
    write_field_csv,
)
from dendplrnn.dynsys.preprocessing import (
    PREPROCESSING_PRESETS,
    add_observation_noise,
    apply_standardization,
    delay_embed,
    ingest_csv,
    standardize,
    write_csv,
)
from dendplrnn.dynsys.systems import (
    SystemSpec,
    TrajectoryBatch,
    default_initial_state,
    default_system_spec,
    simulate_many,
    vector_field_roots,
)
from dendplrnn.general.recipes import RECIPE_REGISTRY, recipe_settings
from dendplrnn.general.sweep import (
    cell_name,
    parse_grid,
    summary_row,
    worker_pool_handler,
    write_summary,
)
from dendplrnn.metrics.measures import MetricOptions, evaluate_reconstruction
from dendplrnn.model.checkpoint import load_checkpoint, save_checkpoint
from dendplrnn.model.dendplrnn import embed_observation, observe, simulate_free
from dendplrnn.training.bptt import TrainConfig, train
from dendplrnn.utils.utils import (
    ArtifactMismatchError,
    ConfigError,
    DendError,
    DivergenceError,
    TrainingDivergedError,
    artifact_stamp,
    check_field_types,
    config_hash,
    file_hash,
    init_logger,
    read_json,
    write_json,
)

CONDITIONS = ("standard", "low_data", "partial_observation", "high_noise")
LOW_DATA_STEPS = 1000
HIGH_NOISE_PROCESS_STD = 0.1
HIGH_NOISE_OBSERVATION = 0.1

SECTIONS = ("system", "data", "training", "metrics", "analysis", "paths", "sweep", "seed", "condition")
SYSTEM_KEYS = ("kind", "params", "dt", "process_noise_std")

# grid keys that do not live under training
GRID_TARGETS = {"M": ("training", "M"), "B": ("training", "B_bases"), "seed": ("seed",)}

EMBED_TOKEN = re.compile(r"(?P<key>m|lag)=(?P<value>\d+)")


def _is_count(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def _section(cls, payload, prefix: str):
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(prefix, "must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
    check_field_types(cls, payload, prefix)
    try:
        return cls(**payload)
    except TypeError as e:
        raise ConfigError(prefix, str(e)) from None


@dataclass
class DataConfig:
    n_train: int = 100000
    n_test: int = 100000
    n_transient: int = 1000
    observation_noise: float = 0.01
    n_trajectories: int = 1
    initial_state: list | None = None
    initial_low: float | list = 0.0
    initial_high: float | list = 1.0
    n_substeps: int = 1
    standardize: bool = True
    csv_path: str | None = None
    skip_header: bool = False
    columns: list | None = None
    dt: float = 1.0
    preprocess: str | None = None
    test_fraction: float = 0.5
    embed_m: int = 1
    embed_lag: int = 1

    def __post_init__(self):
        checks = [
            ("n_train", self.n_train >= 2),
            ("n_test", self.n_test >= 2),
            ("n_transient", self.n_transient >= 0),
            ("observation_noise", self.observation_noise >= 0),
            ("n_trajectories", self.n_trajectories >= 1),
            ("n_substeps", self.n_substeps >= 1),
            ("dt", self.dt > 0),
            ("test_fraction", 0 < self.test_fraction < 1),
            ("embed_m", self.embed_m >= 1),
            ("embed_lag", self.embed_lag >= 1),
            ("preprocess", self.preprocess is None or self.preprocess in PREPROCESSING_PRESETS),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"data.{name}", f"invalid value {getattr(self, name)!r}")


@dataclass
class AnalysisConfig:
    search: str = "exhaustive"
    n_seeds: int = 1000
    cycle_periods: list = field(default_factory=lambda: [2])
    cycle_search: str = "seeded"
    trajectory_length: int = 1000
    grid_resolution: int = 20
    grid_margin: float = 0.1
    root_resolution: int = 10

    def __post_init__(self):
        checks = [
            ("search", self.search in ("exhaustive", "seeded")),
            ("cycle_search", self.cycle_search in ("exhaustive", "seeded")),
            ("n_seeds", self.n_seeds >= 0),
            ("cycle_periods", all(_is_count(n) and n >= 2 for n in self.cycle_periods)),
            ("trajectory_length", self.trajectory_length >= 1),
            ("grid_resolution", self.grid_resolution >= 2),
            ("grid_margin", self.grid_margin >= 0),
            ("root_resolution", self.root_resolution >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"analysis.{name}", f"invalid value {getattr(self, name)!r}")


@dataclass
class PathsConfig:
    data_in: str | None = None
    data_out: str | None = None
    checkpoint: str | None = None
    report: str | None = None
    analysis: str | None = None
    sweep: str | None = None

    def require(self, name: str, command: str) -> Path:
        value = getattr(self, name)
        if not value:
            raise ConfigError(f"paths.{name}", f"required by '{command}'")
        return Path(value)


@dataclass
class SweepConfig:
    grid: str | None = None
    n_workers: int = 1

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError("sweep.n_workers", f"must be >= 1, got {self.n_workers}")


@dataclass
class RunConfig:
    system: SystemSpec | None
    data: DataConfig
    training: dict
    metrics: MetricOptions
    analysis: AnalysisConfig
    paths: PathsConfig
    sweep: SweepConfig
    seed: int = 0
    condition: str = "standard"
    raw: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def train_config(self) -> TrainConfig:
        """Resolve the training section, applying a named recipe underneath"""
        section = dict(self.training)
        recipe = section.pop("recipe", None)
        if recipe is not None:
            if recipe not in RECIPE_REGISTRY:
                raise ConfigError(
                    "training.recipe", f"unknown recipe '{recipe}', choose from {sorted(RECIPE_REGISTRY)}"
                )
            section = recipe_settings(recipe, section)
        section.setdefault("rng_seed", self.seed)
        return TrainConfig.from_dict(section)


def _parse_system(payload) -> SystemSpec | None:
    if payload is None:
        return None
    if not isinstance(payload, dict):
        raise ConfigError("system", "must be a JSON object")
    for key in payload:
        if key not in SYSTEM_KEYS:
            raise ConfigError(f"system.{key}", "unknown field")
    if "kind" not in payload:
        raise ConfigError("system.kind", "required field missing")
    if not isinstance(payload["kind"], str):
        raise ConfigError("system.kind", f"expected str, got {payload['kind']!r}")
    for name in ("dt", "process_noise_std"):
        value = payload.get(name, 0.0)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"system.{name}", f"expected a number, got {value!r}")
    params = payload.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("system.params", "must be a JSON object")
    for name, value in params.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"system.params.{name}", f"expected a number, got {value!r}")

    overrides = {k: payload[k] for k in ("params", "dt", "process_noise_std") if k in payload}
    try:
        return default_system_spec(payload["kind"], **overrides)
    except (TypeError, ValueError) as e:
        field_name = "system.kind" if "kind" in str(e) else "system.params"
        for name in ("dt", "process_noise_std"):
            if name in str(e):
                field_name = f"system.{name}"
        raise ConfigError(field_name, str(e)) from None


def parse_run_config(payload: dict) -> RunConfig:
    """Validate a run document, naming the dotted field path of any problem"""
    if not isinstance(payload, dict):
        raise ConfigError("config", "top level must be a JSON object")
    for key in payload:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown field")

    condition = payload.get("condition", "standard")
    if condition not in CONDITIONS:
        raise ConfigError("condition", f"must be one of {list(CONDITIONS)}, got {condition!r}")
    seed = payload.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {seed!r}")

    training = payload.get("training", {})
    if not isinstance(training, dict):
        raise ConfigError("training", "must be a JSON object")

    metrics = payload.get("metrics", {})
    if not isinstance(metrics, dict):
        raise ConfigError("metrics", "must be a JSON object")

    config = RunConfig(
        system=_parse_system(payload.get("system")),
        data=_section(DataConfig, payload.get("data"), "data"),
        training=training,
        metrics=MetricOptions.from_dict(metrics),
        analysis=_section(AnalysisConfig, payload.get("analysis"), "analysis"),
        paths=_section(PathsConfig, payload.get("paths"), "paths"),
        sweep=_section(SweepConfig, payload.get("sweep"), "sweep"),
        seed=seed,
        condition=condition,
        raw=copy.deepcopy(payload),
    )
    if training:
        config.train_config()
    return config


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"config file {path} does not exist")
    try:
        payload = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}") from None
    return parse_run_config(payload)


def parse_embed(tokens: list[str] | None) -> dict | None:
    """["m=3", "lag=10"] -> {"m": 3, "lag": 10}"""
    if not tokens:
        return None
    embed = {}
    for token in tokens:
        match = EMBED_TOKEN.fullmatch(token)
        if match is None:
            raise ConfigError("--embed", f"cannot parse '{token}', expected m=<int> or lag=<int>")
        embed[match["key"]] = int(match["value"])
    if "m" not in embed:
        raise ConfigError("--embed", "m=<int> is required")
    embed.setdefault("lag", 1)
    return embed


def _split(batch: TrajectoryBatch, start: int, stop: int | None, name: str) -> TrajectoryBatch:
    return batch.derive(
        batch.data[:, start:stop].copy(),
        step={"op": "split", "part": name, "start": start, "stop": stop},
    )


def _simulate_splits(config: RunConfig, log: logging.Logger) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    spec = config.system
    if spec is None:
        raise ConfigError("system", "required unless data.csv_path is set")
    data = config.data
    if config.condition == "high_noise":
        spec = replace(spec, process_noise_std=HIGH_NOISE_PROCESS_STD)
    n_train = LOW_DATA_STEPS if config.condition == "low_data" else data.n_train
    cut = data.n_transient

    if data.n_trajectories == 1:
        x0 = default_initial_state(spec) if data.initial_state is None else data.initial_state
        run = simulate_many(
            spec, [x0], cut + n_train + data.n_test, config.seed, data.n_substeps, log
        )
        return _split(run, cut, cut + n_train, "train"), _split(run, cut + n_train, None, "test")

    rng = np.random.default_rng([config.seed, 7])
    lo = np.broadcast_to(np.asarray(data.initial_low, dtype=np.float64), (spec.dimension,))
    hi = np.broadcast_to(np.asarray(data.initial_high, dtype=np.float64), (spec.dimension,))
    train_x0 = rng.uniform(lo, hi, (data.n_trajectories, spec.dimension))
    test_x0 = rng.uniform(lo, hi, (data.n_trajectories, spec.dimension))
    train_run = simulate_many(spec, train_x0, cut + n_train, config.seed, data.n_substeps, log)
    test_run = simulate_many(spec, test_x0, cut + data.n_test, config.seed + 1, data.n_substeps, log)
    return _split(train_run, cut, None, "train"), _split(test_run, cut, None, "test")


def _ingest_splits(config: RunConfig, log: logging.Logger) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    data = config.data
    if not Path(data.csv_path).is_file():
        raise ConfigError("data.csv_path", f"{data.csv_path} does not exist")
    batch = ingest_csv(data.csv_path, data.skip_header, data.columns, data.dt, log)
    if data.preprocess is not None:
        batch = PREPROCESSING_PRESETS[data.preprocess](batch)
    cut = int(round(batch.T * (1.0 - data.test_fraction)))
    if config.condition == "low_data":
        cut = min(cut, LOW_DATA_STEPS)
    return _split(batch, 0, cut, "train"), _split(batch, cut, None, "test")


def build_dataset(config: RunConfig, embed: dict | None = None, log: logging.Logger | None = None):
    """Train and test batches for a run, after noise, observation selection,
    embedding and standardization with the training constants.
    """
    log = log or logging.getLogger("dendplrnn.cli")
    data = config.data
    if data.csv_path is not None:
        train_batch, test_batch = _ingest_splits(config, log)
        noise = 0.0
    else:
        train_batch, test_batch = _simulate_splits(config, log)
        noise = data.observation_noise

    if config.condition == "high_noise":
        noise = HIGH_NOISE_OBSERVATION
    train_batch = add_observation_noise(train_batch, noise, rng_seed=config.seed + 2)
    test_batch = add_observation_noise(test_batch, noise, rng_seed=config.seed + 3)

    if config.condition == "partial_observation":
        train_batch = train_batch.derive(train_batch.data[:, :, :1].copy(), step={"op": "observe", "columns": [0]})
        test_batch = test_batch.derive(test_batch.data[:, :, :1].copy(), step={"op": "observe", "columns": [0]})

    if embed is None and data.embed_m > 1:
        embed = {"m": data.embed_m, "lag": data.embed_lag}
    if embed is not None and embed["m"] > 1:
        train_batch = delay_embed(train_batch, embed["m"], embed["lag"])
        test_batch = delay_embed(test_batch, embed["m"], embed["lag"])

    if data.standardize:
        train_batch = standardize(train_batch)
        test_batch = apply_standardization(test_batch, train_batch.mean, train_batch.std)

    log.info(
        f"Built dataset: train {train_batch.data.shape}, test {test_batch.data.shape}, condition {config.condition}"
    )
    return train_batch, test_batch, noise


def dataset_hash(data_dir) -> str:
    data_dir = Path(data_dir)
    return file_hash(data_dir / "train.csv", data_dir / "test.csv")


def load_dataset(data_dir, split: str, log: logging.Logger | None = None) -> TrajectoryBatch:
    """Read back one split written by cmd_generate"""
    data_dir = Path(data_dir)
    for name in ("provenance.json", f"{split}.csv"):
        if not (data_dir / name).is_file():
            raise ConfigError("paths.data_in", f"{data_dir / name} does not exist")

    provenance = read_json(data_dir / "provenance.json")
    raw = ingest_csv(data_dir / f"{split}.csv", skip_header=True, dt=provenance["dt"], log=log)
    scaling = provenance["standardization"]
    return TrajectoryBatch(
        data=raw.data.reshape(provenance["shape"][split]),
        dt=provenance["dt"],
        mean=None if scaling is None else scaling["mean"],
        std=None if scaling is None else scaling["std"],
        provenance=provenance["sources"][split],
    )


def cmd_generate(config: RunConfig, embed: dict | None = None, log: logging.Logger | None = None) -> Path:
    log = log or logging.getLogger("dendplrnn.cli")
    out_dir = config.paths.require("data_out", "generate")
    train_batch, test_batch, noise = build_dataset(config, embed, log)

    header = [f"x{i}" for i in range(train_batch.N)]
    write_csv(train_batch, out_dir / "train.csv", header)
    write_csv(test_batch, out_dir / "test.csv", header)

    provenance = {
        "config_hash": config.hash,
        "data_hash": dataset_hash(out_dir),
        "condition": config.condition,
        "seed": config.seed,
        "system": None if config.system is None else config.system.to_dict(),
        "observation_noise": noise,
        "embedding": embed,
        "dt": train_batch.dt,
        "shape": {"train": list(train_batch.data.shape), "test": list(test_batch.data.shape)},
        "standardization": None
        if not train_batch.standardized
        else {"mean": train_batch.mean, "std": train_batch.std},
        "sources": {"train": train_batch.provenance, "test": test_batch.provenance},
    }
    write_json(provenance, out_dir / "provenance.json")
    log.info(f"Wrote train.csv, test.csv and provenance.json to {out_dir}")
    return out_dir


def cmd_train(config: RunConfig, log: logging.Logger | None = None) -> Path:
    log = log or logging.getLogger("dendplrnn.cli")
    data_dir = config.paths.require("data_in", "train")
    checkpoint = config.paths.require("checkpoint", "train")
    train_config = config.train_config()
    if train_config.log_path is None:
        train_config = replace(train_config, log_path=str(checkpoint.with_suffix(".jsonl")))

    train_batch = load_dataset(data_dir, "train", log)
    stamp = artifact_stamp(config.hash, dataset_hash(data_dir))
    meta = {
        "config_hash": stamp.config_hash,
        "data_hash": stamp.data_hash,
        "condition": config.condition,
        "seed": config.seed,
        "training": train_config.to_dict(),
    }

    try:
        params, records = train(train_batch, train_config, log, checkpoint_meta=meta)
    except TrainingDivergedError as e:
        meta["diverged_at_epoch"] = e.epoch
        save_checkpoint(checkpoint, e.last_good_params, train_config.variant, meta)
        log.error(f"Training diverged, last good parameters written to {checkpoint}")
        raise

    meta["epochs"] = len(records)
    meta["final_loss"] = records[-1]["loss"]
    save_checkpoint(checkpoint, params, train_config.variant, meta)
    log.info(f"Wrote checkpoint {checkpoint} (final loss {meta['final_loss']:.6g})")
    return checkpoint


def _load_checkpoint(config: RunConfig, command: str):
    path = config.paths.require("checkpoint", command)
    if not path.is_file():
        raise ConfigError("paths.checkpoint", f"{path} does not exist")
    return load_checkpoint(path)


def cmd_evaluate(config: RunConfig, force: bool = False, log: logging.Logger | None = None) -> dict:
    log = log or logging.getLogger("dendplrnn.cli")
    params, variant, meta = _load_checkpoint(config, "evaluate")
    data_dir = config.paths.require("data_in", "evaluate")
    report_path = config.paths.require("report", "evaluate")

    test = load_dataset(data_dir, "test", log)
    current = dataset_hash(data_dir)
    if meta.get("data_hash") != current:
        message = f"checkpoint was trained on data {meta.get('data_hash')}, {data_dir} holds {current}"
        if not force:
            raise ArtifactMismatchError(message)
        log.warning(f"{message}; continuing because of --force")

    metrics, _ = evaluate_reconstruction(params, variant, test, config.metrics, log)
    report = metrics.to_dict()
    report.update(
        {
            "config": config.raw,
            "config_hash": config.hash,
            "checkpoint_config_hash": meta.get("config_hash"),
            "data_hash": current,
        }
    )
    write_json(report, report_path)
    log.info(f"Wrote metrics report {report_path}")
    return report


def _field_box(observed: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = observed.min(axis=0), observed.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-6)
    return lo - pad, hi + pad


def _compare_with_ground_truth(config: RunConfig, grid: FieldGrid, displacement, test: TrajectoryBatch, log) -> dict:
    """Sign agreement with the true flow and the true fixed points, both in
    the standardized observation units the model was trained in.
    """
    spec = config.system
    mean, std = test.mean, test.std
    original = FieldGrid(
        tuple(np.asarray(grid.lower) * std + mean),
        tuple(np.asarray(grid.upper) * std + mean),
        grid.resolution,
    )
    _, truth = ground_truth_field(spec, original)
    roots = vector_field_roots(
        spec, original.lower, original.upper, resolution=config.analysis.root_resolution
    )
    agreement = field_sign_agreement(displacement, truth / std)
    log.info(f"Vector-field sign agreement with {spec.kind}: {agreement:.3f}")
    return {
        "sign_agreement": agreement,
        "ground_truth_fixed_points": [
            {
                "state": (root.state - mean) / std,
                "eigenvalues": [[float(e.real), float(e.imag)] for e in root.eigenvalues],
                "stability": root.stability,
            }
            for root in roots
        ],
    }


def cmd_analyze(config: RunConfig, log: logging.Logger | None = None) -> dict:
    log = log or logging.getLogger("dendplrnn.cli")
    params, variant, meta = _load_checkpoint(config, "analyze")
    out_dir = config.paths.require("analysis", "analyze")
    settings = config.analysis

    test = load_dataset(config.paths.data_in, "test", log) if config.paths.data_in else None
    z1 = embed_observation(test.data[0, 0], params) if test is not None else np.zeros(params.M)
    try:
        latent = simulate_free(z1, params, variant, settings.trajectory_length)
    except DivergenceError as e:
        log.warning(f"Free run for the analysis diverged: {e}")
        latent = None
    trajectories = [] if latent is None else [latent]

    found, diagnostics = find_fixed_points(
        params,
        variant,
        settings.search,
        n_seeds=settings.n_seeds,
        trajectories=trajectories,
        rng_seed=config.seed,
        log=log,
    )
    cycles = {}
    for n in settings.cycle_periods:
        cycles[str(n)] = [
            c.to_dict()
            for c in k_cycles(
                params,
                variant,
                int(n),
                search=settings.cycle_search,
                trajectories=trajectories,
                rng_seed=config.seed,
                log=log,
            )
        ]

    n_regions, n_borders = count_theoretical_regions(params.M, params.n_bases)
    result = {
        "config_hash": config.hash,
        "checkpoint_config_hash": meta.get("config_hash"),
        "fixed_points": [r.to_dict() for r in found],
        "cycles": cycles,
        "search": {
            "mode": settings.search,
            "candidates": diagnostics.candidates,
            "virtual": diagnostics.virtual,
            "ill_conditioned": len(diagnostics.ill_conditioned),
        },
        "regions": {
            "theoretical": n_regions,
            "borders": n_borders,
            "visited": 0 if latent is None else len(region_census(params, latent, variant)),
        },
    }

    if latent is not None:
        observed = observe(latent, params)
        write_csv(TrajectoryBatch(observed), out_dir / "trajectory.csv", [f"x{i}" for i in range(params.N)])

    if params.N == 2:
        reference = test.pooled() if test is not None else (observed if latent is not None else np.array([[-2.0, -2.0], [2.0, 2.0]]))
        lo, hi = _field_box(reference, settings.grid_margin)
        grid = FieldGrid(tuple(lo), tuple(hi), settings.grid_resolution)
        points, displacement = vector_field(params, grid, variant)
        write_field_csv(points, displacement, out_dir / "vector_field.csv")
        if (
            config.system is not None
            and config.system.dimension == 2
            and test is not None
            and test.standardized
        ):
            result["vector_field"] = _compare_with_ground_truth(config, grid, displacement, test, log)

    write_json(result, out_dir / "analysis.json")
    log.info(
        f"Wrote analysis to {out_dir}: {len(found)} fixed points, {sum(len(c) for c in cycles.values())} cycles"
    )
    return result


def cell_payload(raw: dict, cell: dict, cell_dir: Path) -> dict:
    """Run document for one grid cell, writing its artifacts under cell_dir"""
    payload = copy.deepcopy(raw)
    payload.pop("sweep", None)
    training = payload.setdefault("training", {})
    for key, value in cell.items():
        target = GRID_TARGETS.get(key, ("training", key))
        if target == ("seed",):
            payload["seed"] = value
            training.pop("rng_seed", None)
        else:
            training[target[1]] = value

    training["n_workers"] = 1
    training["log_path"] = str(cell_dir / "train.jsonl")
    if training.get("checkpoint_every"):
        training["checkpoint_dir"] = str(cell_dir / "checkpoints")
    paths = payload.setdefault("paths", {})
    paths["checkpoint"] = str(cell_dir / "checkpoint.json")
    paths["report"] = str(cell_dir / "report.json")
    return payload


def run_sweep_cell(payload: dict, log_path=None, log_level: str = "INFO") -> tuple[bool, dict]:
    """Train and evaluate one cell; failures come back as unsuccessful rows"""
    config = parse_run_config(payload)
    train_config = config.train_config()
    log = init_logger(f"dendplrnn.sweep.M{train_config.M}_B{train_config.B_bases}_seed{config.seed}", log_path, log_level)
    try:
        cmd_train(config, log)
        report = cmd_evaluate(config, log=log)
    except (DendError, ValueError, OSError) as e:
        return False, summary_row(train_config.M, train_config.B_bases, config.seed, error=f"{type(e).__name__}: {e}")
    return True, summary_row(train_config.M, train_config.B_bases, config.seed, report)


def cmd_sweep(
    config: RunConfig,
    grid: str | None = None,
    n_workers: int | None = None,
    log: logging.Logger | None = None,
    log_path=None,
    log_level: str = "INFO",
) -> list[dict]:
    log = log or logging.getLogger("dendplrnn.cli")
    out_dir = config.paths.require("sweep", "sweep")
    grid = grid or config.sweep.grid
    if not grid:
        raise ConfigError("sweep.grid", "required by 'sweep' (or pass --grid)")
    n_workers = config.sweep.n_workers if n_workers is None else n_workers
    cells = parse_grid(grid)

    raw = copy.deepcopy(config.raw)
    if not config.paths.data_in:
        data_dir = out_dir / "data"
        generate_config = parse_run_config({**raw, "paths": {**raw.get("paths", {}), "data_out": str(data_dir)}})
        cmd_generate(generate_config, log=log)
        raw.setdefault("paths", {})["data_in"] = str(data_dir)

    payloads = []
    for cell in cells:
        payload = cell_payload(raw, cell, out_dir / cell_name(cell))
        parse_run_config(payload).train_config()
        payloads.append(payload)

    log.info(f"Sweeping {len(cells)} cells with {n_workers} workers into {out_dir}")

    if n_workers == 1:
        rows = []
        for payload in payloads:
            success, row = run_sweep_cell(payload, log_path, log_level)
            if not success:
                log.warning(f"Cell M={row['M']} B={row['B']} seed={row['seed']} failed: {row['error']}")
            rows.append(row)
    else:
        worker_pool = worker_pool_handler(workers=n_workers, logger=log)
        try:
            for cell, payload in zip(cells, payloads):
                worker_pool.submit_job(
                    func=run_sweep_cell,
                    cell=cell,
                    kwds={"payload": payload, "log_path": log_path, "log_level": log_level},
                )
        finally:
            worker_pool.close()
        rows = worker_pool.rows
        if worker_pool.failures:
            log.error(f"{len(worker_pool.failures)} sweep workers crashed")

    summary_path, rates_path = write_summary(rows, out_dir)
    log.info(f"Wrote {summary_path} and {rates_path}")
    return rows


def run(args) -> int:
    log = init_logger("dendplrnn", args.logfile, args.log_level)

    try:
        config = load_run_config(args.config)
        if args.command == "generate":
            cmd_generate(config, parse_embed(args.embed), log)
        elif args.command == "train":
            cmd_train(config, log)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.force, log)
        elif args.command == "analyze":
            cmd_analyze(config, log)
        elif args.command == "sweep":
            cmd_sweep(config, args.grid, args.n_workers, log, args.logfile, args.log_level)

    except ConfigError as e:
        log.error(f"Invalid configuration at {e.field}: {e.message}")
        print(json.dumps({"error": "config", "field": e.field, "message": e.message}), file=sys.stderr)
        return 2

    except (DendError, OSError, ValueError) as e:
        log.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1

    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="dendplrnn")
    parser.add_argument("--logfile", type=Path, required=False, help="Path to logfile")
    parser.add_argument(
        "--log_level",
        type=str,
        help="Log level for logger object",
        choices=["NOTSET", "INFO", "DEBUG", "WARNING", "ERROR", "CRITICAL"],
        default="INFO",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate_parser = subparsers.add_parser("generate", help="Simulate or ingest a dataset")
    generate_parser.add_argument(
        "--embed", nargs="+", help="Delay-embed the observations, e.g. --embed m=3 lag=10"
    )
    subparsers.add_parser("train", help="Fit a model to the training split")
    evaluate_parser = subparsers.add_parser("evaluate", help="Score a checkpoint on the test split")
    evaluate_parser.add_argument(
        "--force", action="store_true", default=False, help="Evaluate even if the data hash does not match"
    )
    subparsers.add_parser("analyze", help="Fixed points, cycles and vector field of a checkpoint")
    sweep_parser = subparsers.add_parser("sweep", help="Train and evaluate over a parameter grid")
    sweep_parser.add_argument("--grid", type=str, help='Grid spec, e.g. "M=10 B=0,20 seed=0..4"')
    sweep_parser.add_argument("--n_workers", type=int, help="Number of cells run concurrently")

    for sub in subparsers.choices.values():
        sub.add_argument("config", type=Path, help="Run configuration (JSON)")

    args = parser.parse_args(argv)

    sys.exit(run(args))


if __name__ == "__main__":
    main()
