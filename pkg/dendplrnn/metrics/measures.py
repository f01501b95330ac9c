"""Reconstruction measures: state-space divergence (binned and Gaussian
mixture), power-spectrum correlation and n-step prediction error.
"""

from dataclasses import asdict, dataclass, field, fields
import logging

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from dendplrnn.dynsys.systems import TrajectoryBatch
from dendplrnn.model.dendplrnn import (
    PLAIN,
    DendParams,
    Variant,
    embed_observation,
    observe,
    simulate_free,
    step,
)
from dendplrnn.utils.utils import (
    ConfigError,
    DegenerateDimensionError,
    DivergenceError,
    check_field_types,
    get_logger,
)

MAX_BINS = 10**8
MIN_PSC_LENGTH = 256
PSC_REFERENCE_LENGTH = 100000


@dataclass
class MetricOptions:
    m_bins: int = 30
    n_transient: int = 1000
    sigma2: float = 1.0
    n_mc: int = 1000
    max_centers: int = 5000
    gmm_log_scale: bool = False
    psc_smooth_sigma: float = 20.0
    psc_cutoff: float = 0.1
    pe_steps: list = field(default_factory=lambda: [1, 5, 20])
    pe_warmup: int = 50
    pe_stride: int = 10
    success_threshold: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        checks = [
            ("m_bins", self.m_bins >= 1),
            ("n_transient", self.n_transient >= 0),
            ("sigma2", self.sigma2 > 0),
            ("n_mc", self.n_mc >= 1),
            ("max_centers", self.max_centers >= 1),
            ("psc_smooth_sigma", self.psc_smooth_sigma >= 0),
            ("psc_cutoff", 0 < self.psc_cutoff <= 1),
            (
                "pe_steps",
                all(isinstance(n, (int, np.integer)) and not isinstance(n, bool) and n >= 1 for n in self.pe_steps),
            ),
            ("pe_warmup", self.pe_warmup >= 0),
            ("pe_stride", self.pe_stride >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"metrics.{name}", f"invalid value {getattr(self, name)!r}")
        self.pe_steps = [int(n) for n in self.pe_steps]

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricOptions":
        known = {f.name for f in fields(cls)}
        for key in payload:
            if key not in known:
                raise ConfigError(f"metrics.{key}", "unknown field")
        check_field_types(cls, payload, "metrics")
        return cls(**payload)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconMetrics:
    dstsp_bin: float | None
    dstsp_gmm: float
    psc: float
    pe: dict
    success: bool
    threshold: float = 4.0

    def to_dict(self) -> dict:
        return {
            "dstsp_bin": self.dstsp_bin,
            "dstsp_gmm": self.dstsp_gmm,
            "psc": self.psc,
            "pe": {str(k): v for k, v in sorted(self.pe.items())},
            "success": self.success,
            "success_threshold": self.threshold,
        }


def _series(data) -> np.ndarray:
    if isinstance(data, TrajectoryBatch):
        return data.data
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        return data.reshape(1, -1, 1)
    if data.ndim == 2:
        return data[None]
    return data


def dstsp_binning(truth, generated, m_bins: int = 30, n_transient: int = 1000) -> float:
    """KL divergence between binned state occupancies of truth and generated.

    Bins span the truth mean +- 2 std per dimension, outliers go to the edge
    bins, and empty generated bins get the mass 1/(10 * n_generated).
    """
    true_series = _series(truth)
    gen_series = _series(generated)
    N = true_series.shape[2]
    if gen_series.shape[2] != N:
        raise ValueError(f"truth has N={N}, generated has N={gen_series.shape[2]}")
    if float(m_bins) ** N > MAX_BINS:
        raise ValueError(
            f"{m_bins}^{N} bins exceeds {MAX_BINS:.0e}; use dstsp_gmm for this dimension"
        )
    if gen_series.shape[1] <= n_transient:
        raise ValueError(
            f"generated series of length {gen_series.shape[1]} is not longer than the {n_transient}-step transient"
        )

    x_true = true_series.reshape(-1, N)
    x_gen = gen_series[:, n_transient:].reshape(-1, N)

    mean = x_true.mean(axis=0)
    std = x_true.std(axis=0)
    for dim, s in enumerate(std):
        if not s > 0:
            raise DegenerateDimensionError(dim)
    lower = mean - 2.0 * std
    width = 4.0 * std / m_bins
    shape = (m_bins,) * N

    def occupancy(x):
        idx = np.clip(np.floor((x - lower) / width), 0, m_bins - 1).astype(np.int64)
        return np.unique(np.ravel_multi_index(tuple(idx.T), shape), return_counts=True)

    true_bins, true_counts = occupancy(x_true)
    gen_bins, gen_counts = occupancy(x_gen)

    p = true_counts / x_true.shape[0]
    pos = np.searchsorted(gen_bins, true_bins)
    pos_clipped = np.minimum(pos, gen_bins.shape[0] - 1)
    present = (pos < gen_bins.shape[0]) & (gen_bins[pos_clipped] == true_bins)
    floor = 1.0 / (10.0 * x_gen.shape[0])
    q = np.where(present, gen_counts[pos_clipped] / x_gen.shape[0], floor)

    return float(np.sum(p * np.log(p / q)))


def _subsample(x: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= cap:
        return x
    return x[np.sort(rng.choice(x.shape[0], cap, replace=False))]


def _mixture_log_density(samples: np.ndarray, centres: np.ndarray, sigma2: float, chunk: int = 1000) -> np.ndarray:
    """log of the equal-weight mixture density, up to the shared Gaussian constant"""
    out = np.empty(samples.shape[0])
    for start in range(0, samples.shape[0], chunk):
        d2 = cdist(samples[start : start + chunk], centres, "sqeuclidean")
        out[start : start + chunk] = logsumexp(-0.5 * d2 / sigma2, axis=1)
    return out - np.log(centres.shape[0])


def dstsp_gmm(
    truth,
    generated,
    sigma2: float = 1.0,
    n_mc: int = 1000,
    rng_seed: int = 0,
    max_centers: int = 5000,
    n_transient: int = 0,
    log_scale: bool = False,
) -> float:
    """Monte Carlo KL between Gaussian mixtures (covariance sigma2*I) centred
    on the truth and the generated states, sampling from the truth mixture.
    """
    true_series = _series(truth)
    gen_series = _series(generated)
    N = true_series.shape[2]
    if gen_series.shape[2] != N:
        raise ValueError(f"truth has N={N}, generated has N={gen_series.shape[2]}")

    rng = np.random.default_rng(rng_seed)
    true_centres = _subsample(true_series.reshape(-1, N), max_centers, rng)
    gen_centres = _subsample(gen_series[:, n_transient:].reshape(-1, N), max_centers, rng)

    picks = rng.integers(0, true_centres.shape[0], n_mc)
    samples = true_centres[picks] + np.sqrt(sigma2) * rng.standard_normal((n_mc, N))

    log_p = _mixture_log_density(samples, true_centres, sigma2)
    log_q = _mixture_log_density(samples, gen_centres, sigma2)
    estimate = float(np.mean(log_p - log_q))
    if log_scale:
        return float(np.log(max(estimate, np.finfo(float).tiny)))
    return estimate


def _power_spectra(series: np.ndarray, length: int, smooth_sigma: float, cutoff_fraction: float) -> np.ndarray:
    x = series[:, :length]
    std = x.std(axis=1, keepdims=True)
    for dim in np.flatnonzero(np.any(std[:, 0] == 0, axis=0)):
        raise DegenerateDimensionError(int(dim))
    x = (x - x.mean(axis=1, keepdims=True)) / std

    power = np.mean(np.abs(np.fft.rfft(x, axis=1)) ** 2, axis=0)
    sigma = smooth_sigma * length / PSC_REFERENCE_LENGTH
    if sigma >= 0.25:
        power = ndimage.gaussian_filter1d(power, sigma, axis=0, mode="nearest")
    power = power / power.sum(axis=0, keepdims=True)

    keep = max(2, int(np.ceil(cutoff_fraction * power.shape[0])))
    return power[:keep]


def psc(
    truth,
    generated,
    smooth_sigma: float = 20.0,
    cutoff_fraction: float = 0.1,
    max_len: int = PSC_REFERENCE_LENGTH,
) -> float:
    """Mean over dimensions of the Pearson correlation between smoothed,
    normalised low-frequency power spectra.
    """
    true_series = _series(truth)
    gen_series = _series(generated)
    if true_series.shape[2] != gen_series.shape[2]:
        raise ValueError(
            f"truth has N={true_series.shape[2]}, generated has N={gen_series.shape[2]}"
        )
    length = min(true_series.shape[1], gen_series.shape[1], max_len)
    if length < MIN_PSC_LENGTH:
        raise ValueError(f"series of length {length} is too short for a spectrum (needs {MIN_PSC_LENGTH})")

    p_true = _power_spectra(true_series, length, smooth_sigma, cutoff_fraction)
    p_gen = _power_spectra(gen_series, length, smooth_sigma, cutoff_fraction)

    correlations = [
        np.corrcoef(p_true[:, i], p_gen[:, i])[0, 1] for i in range(p_true.shape[1])
    ]
    return float(np.clip(np.mean(correlations), -1.0, 1.0))


def pe_n_step(
    params: DendParams,
    test,
    n: int,
    variant: Variant = PLAIN,
    warmup: int = 50,
    stride: int = 10,
) -> float:
    """Mean squared n-step-ahead free-run error.

    For every evaluated t (every stride-th step) the latent state is built
    by forcing the read-out states with the preceding min(t, warmup)
    observations and with x_t itself, then the model runs n steps freely.
    """
    if n < 1:
        raise ValueError(f"prediction horizon must be >= 1, got {n}")
    if not params.identity_mapping:
        raise ValueError("n-step prediction error requires the identity observation mapping")

    series = _series(test)
    n_traj, T, N = series.shape
    if T < warmup + n + 1:
        raise ValueError(f"test series of length {T} is shorter than warmup + n = {warmup + n + 1}")

    total, count = 0.0, 0
    starts = np.arange(0, T - n, stride)
    init_index = np.maximum(starts - warmup, 0)
    with np.errstate(over="ignore", invalid="ignore"):
        for x in series:
            z = np.zeros((starts.shape[0], params.M))
            try:
                for offset in range(-warmup, 1):
                    idx = starts + offset
                    valid = idx >= 0
                    first = valid & (idx == init_index)
                    if np.any(first):
                        z[first] = embed_observation(x[idx[first]], params)
                    z[valid, :N] = x[idx[valid]]
                    if offset < 0 and np.any(valid):
                        z[valid] = step(z[valid], params, variant)
                for _ in range(n):
                    z = step(z, params, variant)
            except DivergenceError:
                return float("inf")
            errors = observe(z, params) - x[starts + n]
            total += float(np.sum(errors * errors))
            count += starts.shape[0]

    return total / (N * count)


def evaluate_reconstruction(
    params: DendParams,
    variant: Variant,
    test: TrajectoryBatch,
    options: MetricOptions | None = None,
    log: logging.Logger | None = None,
) -> tuple[ReconMetrics, TrajectoryBatch | None]:
    """Free-run the model from the first test observation and score it.

    Returns:
        tuple[ReconMetrics, TrajectoryBatch]: metrics and the generated
        observation series (None when the free run diverged)
    """
    log = get_logger(log, "metrics")
    options = MetricOptions() if options is None else options

    pe = {k: pe_n_step(params, test, k, variant, options.pe_warmup, options.pe_stride) for k in options.pe_steps}

    z1 = embed_observation(test.data[0, 0], params)
    try:
        latent = simulate_free(z1, params, variant, test.T + options.n_transient)
    except DivergenceError as e:
        log.warning(f"Free run diverged: {e}")
        metrics = ReconMetrics(
            dstsp_bin=float("inf"),
            dstsp_gmm=float("inf"),
            psc=float("nan"),
            pe=pe,
            success=False,
            threshold=options.success_threshold,
        )
        return metrics, None

    generated = TrajectoryBatch(
        data=observe(latent[options.n_transient :], params),
        dt=test.dt,
        provenance={"source": "free_run", "n_transient": options.n_transient, "steps": []},
    )

    try:
        d_bin = dstsp_binning(test, generated, options.m_bins, n_transient=0)
    except ValueError as e:
        log.warning(f"Skipping binned state-space divergence: {e}")
        d_bin = None
    d_gmm = dstsp_gmm(
        test,
        generated,
        sigma2=options.sigma2,
        n_mc=options.n_mc,
        rng_seed=options.rng_seed,
        max_centers=options.max_centers,
        log_scale=options.gmm_log_scale,
    )
    try:
        spectrum_corr = psc(test, generated, options.psc_smooth_sigma, options.psc_cutoff)
    except DegenerateDimensionError as e:
        log.warning(f"Generated series is constant, spectrum correlation undefined: {e}")
        spectrum_corr = float("nan")

    metrics = ReconMetrics(
        dstsp_bin=d_bin,
        dstsp_gmm=d_gmm,
        psc=spectrum_corr,
        pe=pe,
        success=d_bin is not None and d_bin < options.success_threshold,
        threshold=options.success_threshold,
    )
    log.info(
        f"dstsp_bin={d_bin} dstsp_gmm={d_gmm:.4g} psc={spectrum_corr:.4g} pe={pe}"
    )
    return metrics, generated
