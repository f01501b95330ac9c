from pathlib import Path
import csv
import logging

import numpy as np
from scipy import ndimage

from dendplrnn.dynsys.systems import TrajectoryBatch
from dendplrnn.utils.utils import (
    DataFormatError,
    DegenerateDimensionError,
    get_logger,
)

# below this width a Gaussian kernel is numerically a delta
MIN_SMOOTH_SIGMA = 0.25


def add_observation_noise(
    batch: TrajectoryBatch, variance_fraction: float, rng_seed: int = 0
) -> TrajectoryBatch:
    """Add i.i.d. Gaussian noise with variance variance_fraction times the
    pooled per-dimension variance of the batch.
    """
    if variance_fraction < 0:
        raise ValueError(f"variance_fraction must be >= 0, got {variance_fraction}")
    if variance_fraction == 0:
        return batch.derive(batch.data.copy())

    rng = np.random.default_rng(rng_seed)
    noise_std = np.sqrt(variance_fraction * batch.pooled().var(axis=0))
    noisy = batch.data + noise_std * rng.standard_normal(batch.data.shape)
    return batch.derive(
        noisy,
        step={
            "op": "observation_noise",
            "variance_fraction": float(variance_fraction),
            "rng_seed": int(rng_seed),
        },
    )


def standardize(batch: TrajectoryBatch) -> TrajectoryBatch:
    """Zero mean, unit variance per dimension, pooled over trajectories and
    time. The constants are stored on the batch for inverse transforms.
    """
    pooled = batch.pooled()
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    for dim, s in enumerate(std):
        if not s > 0:
            raise DegenerateDimensionError(dim)
    return apply_standardization(batch, mean, std)


def apply_standardization(
    batch: TrajectoryBatch, mean, std
) -> TrajectoryBatch:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (batch.N,) or std.shape != (batch.N,):
        raise ValueError(
            f"standardization constants must have shape ({batch.N},), got {mean.shape} and {std.shape}"
        )
    for dim, s in enumerate(std):
        if not s > 0:
            raise DegenerateDimensionError(dim)
    return batch.derive(
        (batch.data - mean) / std,
        step={"op": "standardize", "mean": mean.tolist(), "std": std.tolist()},
        mean=mean,
        std=std,
    )


def unstandardize(batch: TrajectoryBatch) -> TrajectoryBatch:
    if not batch.standardized:
        raise ValueError("batch is not standardized")
    return batch.derive(
        batch.data * batch.std + batch.mean,
        step={"op": "unstandardize"},
        mean=None,
        std=None,
    )


def _smooth(batch: TrajectoryBatch, weights: np.ndarray) -> np.ndarray:
    if batch.T <= weights.shape[0]:
        raise ValueError(
            f"series of length {batch.T} is not longer than the smoothing window {weights.shape[0]}"
        )
    # edges: truncate the kernel and renormalise by the weight mass that fell inside
    smoothed = ndimage.convolve1d(batch.data, weights, axis=1, mode="constant")
    mass = ndimage.convolve1d(
        np.ones(batch.T), weights, mode="constant"
    )
    return smoothed / mass[None, :, None]


def gaussian_smooth(batch: TrajectoryBatch, sigma_bins: float) -> TrajectoryBatch:
    if not sigma_bins > 0:
        raise ValueError(f"sigma_bins must be positive, got {sigma_bins}")
    if sigma_bins < MIN_SMOOTH_SIGMA:
        return batch.derive(batch.data.copy())

    radius = int(np.ceil(4 * sigma_bins))
    offsets = np.arange(-radius, radius + 1)
    weights = np.exp(-0.5 * (offsets / sigma_bins) ** 2)
    return batch.derive(
        _smooth(batch, weights / weights.sum()),
        step={"op": "gaussian_smooth", "sigma_bins": float(sigma_bins)},
    )


def hann_smooth(batch: TrajectoryBatch, window: int) -> TrajectoryBatch:
    """Centred Hann smoothing; window is an odd number of samples"""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd number of samples, got {window}")
    weights = np.hanning(window)
    if not weights.sum() > 0:
        raise ValueError(f"Hann window of length {window} has no mass")
    return batch.derive(
        _smooth(batch, weights / weights.sum()),
        step={"op": "hann_smooth", "window": int(window)},
    )


def delay_embed(series, m: int, lag: int, dt: float = 1.0) -> TrajectoryBatch:
    """Row t of the output is (s_t, s_{t-lag}, ..., s_{t-(m-1)lag}).

    Args:
        series (array | TrajectoryBatch): 1-d series, or a batch with N = 1
            whose trajectories are embedded independently
        m (int): Embedding dimension
        lag (int): Delay in samples

    Returns:
        TrajectoryBatch: length T - (m-1)*lag, m columns
    """
    if m < 1 or lag < 1:
        raise ValueError(f"embedding needs m >= 1 and lag >= 1, got m={m}, lag={lag}")

    if isinstance(series, TrajectoryBatch):
        if series.N != 1:
            raise ValueError(f"delay embedding needs a 1-d series, got N={series.N}")
        source = series
        traces = series.data[:, :, 0]
    else:
        source = None
        traces = np.asarray(series, dtype=np.float64)
        if traces.ndim != 1:
            raise ValueError(f"delay embedding needs a 1-d series, got shape {traces.shape}")
        traces = traces[None]

    T = traces.shape[1]
    span = (m - 1) * lag
    if T <= span:
        raise ValueError(
            f"series of length {T} is too short for m={m}, lag={lag} (needs > {span})"
        )

    embedded = np.stack(
        [traces[:, span - k * lag : T - k * lag] for k in range(m)], axis=-1
    )
    step = {"op": "delay_embed", "m": int(m), "lag": int(lag)}
    if source is not None:
        # every column is a shifted copy of the one source series
        if source.standardized:
            mean, std = np.repeat(source.mean, m), np.repeat(source.std, m)
        else:
            mean, std = None, None
        return source.derive(embedded, step=step, mean=mean, std=std)
    return TrajectoryBatch(
        data=embedded, dt=dt, provenance={"source": "array", "steps": [step]}
    )


def ingest_csv(
    path,
    skip_header: bool = False,
    columns: list[int] | None = None,
    dt: float = 1.0,
    log: logging.Logger | None = None,
) -> TrajectoryBatch:
    """Read a rectangular numeric CSV, one time step per row.

    Args:
        path (Path): CSV file
        skip_header (bool): Ignore the first row
        columns (list[int]): 0-based columns to keep, all when None
        dt (float): Sampling interval recorded on the batch

    Returns:
        TrajectoryBatch: Shape [1][rows][columns]
    """
    log = get_logger(log, "dynsys")
    path = Path(path)
    rows = []
    width = None
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if skip_header and line_no == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}: row {line_no} has {len(row)} columns, expected {width}"
                )
            values = []
            for col_no, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {line_no}, column {col_no}"
                    ) from None
                if not np.isfinite(values[-1]):
                    raise DataFormatError(
                        f"{path}: non-finite cell {cell!r} at row {line_no}, column {col_no}"
                    )
            rows.append(values)

    if not rows:
        raise DataFormatError(f"{path}: file contains no data rows (row 1, column 1)")

    data = np.array(rows)
    if columns is not None:
        for col in columns:
            if not 0 <= col < width:
                raise DataFormatError(
                    f"{path}: column {col + 1} requested but rows have {width} columns"
                )
        data = data[:, columns]

    log.info(f"Read {data.shape[0]} rows x {data.shape[1]} columns from {path}")

    return TrajectoryBatch(
        data=data,
        dt=dt,
        provenance={
            "source": "csv",
            "path": str(path),
            "columns": columns,
            "skip_header": skip_header,
            "steps": [],
        },
    )


def write_csv(batch: TrajectoryBatch, path, header: list[str] | None = None) -> None:
    """Write all trajectories stacked in time order, one step per row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in batch.pooled():
            writer.writerow([repr(float(v)) for v in row])


def preprocess_ecg(series) -> TrajectoryBatch:
    """Gaussian smoothing (5 bins), standardization, 7-d delay embedding at lag 61"""
    batch = series if isinstance(series, TrajectoryBatch) else TrajectoryBatch(
        np.asarray(series, dtype=np.float64).reshape(1, -1, 1)
    )
    batch = standardize(gaussian_smooth(batch, 5.0))
    return delay_embed(batch, m=7, lag=61)


def preprocess_eeg(batch: TrajectoryBatch) -> TrajectoryBatch:
    return hann_smooth(standardize(batch), 15)


PREPROCESSING_PRESETS = {"ecg": preprocess_ecg, "eeg": preprocess_eeg}
