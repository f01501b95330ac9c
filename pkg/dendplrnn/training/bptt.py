"""Back-propagation through time with sparse teacher forcing.

Windows of seq_len observations are rolled out from z_1 = [x_1, L x_1]. At
forced steps t = 1, 1 + tau, 1 + 2 tau, ... the first N latent states are
overwritten with the observations after the loss at t has been taken from
the unforced state. Gradients are computed by hand: on every step the map is
affine, so each adjoint is a transposed local Jacobian.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
import logging
import multiprocessing as mp
import time

import numpy as np
from scipy import optimize

from dendplrnn.dynsys.systems import TrajectoryBatch
from dendplrnn.model.checkpoint import save_checkpoint
from dendplrnn.model.dendplrnn import (
    DendParams,
    Variant,
    centering_matrix,
    embed_observation,
    phi_basis,
    phi_derivative,
    preactivation,
)
from dendplrnn.training.optimizer import AdamState, clip_by_global_norm
from dendplrnn.utils.utils import (
    ConfigError,
    GradientError,
    TrainingDivergedError,
    append_jsonl,
    check_field_types,
    get_logger,
)


@dataclass
class TrainConfig:
    M: int
    B_bases: int
    tau: int = 25
    seq_len: int = 500
    batch_size: int = 16
    epochs: int = 1000
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    lambda_mar: float = 0.0
    m_reg: int = 0
    clipped: bool = False
    mean_centered: bool = False
    rng_seed: int = 0
    gradient_clip_norm: float = 10.0
    batches_per_epoch: int = 1
    n_workers: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        checks = [
            ("M", self.M >= 1, "must be >= 1"),
            ("B_bases", self.B_bases >= 0, "must be >= 0"),
            ("tau", self.tau >= 1, "must be >= 1"),
            ("seq_len", self.seq_len >= 2, "must be >= 2"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("lr_start", self.lr_start > 0, "must be positive"),
            ("lr_end", 0 < self.lr_end <= self.lr_start, "must be in (0, lr_start]"),
            ("lambda_mar", self.lambda_mar >= 0, "must be >= 0"),
            ("m_reg", 0 <= self.m_reg <= self.M, "must be between 0 and M"),
            ("gradient_clip_norm", self.gradient_clip_norm > 0, "must be positive"),
            ("batches_per_epoch", self.batches_per_epoch >= 1, "must be >= 1"),
            ("n_workers", self.n_workers >= 1, "must be >= 1"),
            ("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"training.{name}", f"{message}, got {getattr(self, name)!r}")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ConfigError(
                "training.checkpoint_dir", "required when checkpoint_every > 0"
            )
        if self.clipped and self.B_bases == 0:
            raise ConfigError(
                "training.clipped", "the clipped map of a standard PLRNN (B_bases = 0) is affine, use B_bases >= 1"
            )

    @property
    def variant(self) -> Variant:
        return Variant(clipped=self.clipped, mean_centered=self.mean_centered)

    @property
    def lr_decay(self) -> float:
        """Per-epoch factor taking lr_start to lr_end over the run"""
        if self.epochs == 1:
            return 1.0
        return (self.lr_end / self.lr_start) ** (1.0 / (self.epochs - 1))

    def learning_rate(self, epoch: int) -> float:
        return self.lr_start * self.lr_decay**epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict, prefix: str = "training") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in payload:
            if key not in known:
                raise ConfigError(f"{prefix}.{key}", "unknown field")
        for key in ("M", "B_bases"):
            if key not in payload:
                raise ConfigError(f"{prefix}.{key}", "required field missing")
        check_field_types(cls, payload, prefix)
        try:
            return cls(**payload)
        except TypeError as e:
            raise ConfigError(prefix, str(e)) from None


@dataclass
class Rollout:
    """Forward pass record; arrays carry a leading window axis"""

    z: np.ndarray
    z_forced: np.ndarray
    u: np.ndarray
    window: np.ndarray
    forced: np.ndarray
    loss: float
    single: bool = False

    @property
    def states(self) -> np.ndarray:
        """Pre-forcing latent states, [seq_len][M] for a single window"""
        return self.z[0] if self.single else self.z


def forcing_mask(seq_len: int, tau: int) -> np.ndarray:
    return np.arange(seq_len) % tau == 0


def _rescale_coupling(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    def excess(c):
        return np.linalg.norm(np.diag(A) + c * W, 2) - 1.0

    if excess(1.0) <= 0:
        return W
    c = optimize.brentq(excess, 0.0, 1.0, xtol=1e-12)
    while excess(c) > 0:
        c *= 0.999
    return c * W


def init_params(
    config: TrainConfig,
    data: TrajectoryBatch,
    rng: np.random.Generator | None = None,
    log: logging.Logger | None = None,
) -> DendParams:
    """Draw initial parameters.

    alphas ~ U[-B^-0.5, B^-0.5]; thresholds uniform over the data range of
    the matching observation dimension (pooled range for the other latent
    states); A ~ U[0.5, 0.99]; W ~ N(0, 1/M) shrunk until
    ||diag(A) + W||_2 <= 1; h0 = 0; L = 0. B_bases = 0 gives the standard
    PLRNN with its fixed ReLU basis.
    """
    log = get_logger(log, "training")
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    M, B, N = config.M, config.B_bases, data.N
    if M < N:
        raise ConfigError("training.M", f"must be >= observation dimension {N}, got {M}")

    pooled = data.pooled()
    lo = np.full(M, pooled.min())
    hi = np.full(M, pooled.max())
    if data.standardized:
        lo[:N] = pooled.min(axis=0)
        hi[:N] = pooled.max(axis=0)
    else:
        log.warning(
            "Initialising thresholds from unstandardized data, using the pooled data range for every latent state"
        )

    bound = B**-0.5 if B > 0 else 0.0
    alphas = rng.uniform(-bound, bound, B)
    thresholds = rng.uniform(lo, hi, size=(B, M))
    A = rng.uniform(0.5, 0.99, M)
    W = rng.normal(0.0, 1.0 / np.sqrt(M), (M, M))
    np.fill_diagonal(W, 0.0)
    W = _rescale_coupling(A, W)

    return DendParams(
        A=A,
        W=W,
        h0=np.zeros(M),
        alphas=alphas,
        thresholds=thresholds,
        n_obs=N,
        L=np.zeros((M - N, N)),
        fixed_basis=B == 0,
    )


def teacher_forced_rollout(params: DendParams, config: TrainConfig, window) -> Rollout:
    """Forced forward pass over one window [seq_len][N] or a stack of windows"""
    if not params.identity_mapping:
        raise ValueError("teacher forcing requires the identity observation mapping")
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    n_windows, T, N = x.shape
    if T != config.seq_len:
        raise ValueError(f"window has {T} steps, config.seq_len is {config.seq_len}")
    if N != params.N:
        raise ValueError(f"window has {N} dimensions, model reads out N={params.N}")

    variant = config.variant
    forced = forcing_mask(T, config.tau)
    z_all = np.empty((n_windows, T, params.M))
    zf_all = np.empty_like(z_all)
    u_all = np.empty_like(z_all)

    z = embed_observation(x[:, 0], params)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            z_all[:, t] = z
            if forced[t]:
                z = z.copy()
                z[:, :N] = x[:, t]
            zf_all[:, t] = z
            u = preactivation(z, variant)
            u_all[:, t] = u
            if t < T - 1:
                z = params.A * z + phi_basis(u, params, variant.clipped) @ params.W.T + params.h0

        errors = z_all[:, :, :N] - x
        loss = float(np.sum(errors * errors) / (T * n_windows))

    return Rollout(
        z=z_all, z_forced=zf_all, u=u_all, window=x, forced=forced, loss=loss, single=single
    )


def backward(params: DendParams, config: TrainConfig, rollout: Rollout) -> dict[str, np.ndarray]:
    """Exact gradients of rollout.loss w.r.t. A, W, h0, alphas, thresholds, L
    (the basis blocks are left out for a fixed basis).

    Adjoints are cut on the replaced components at forced steps; the kink
    subgradient is 0.
    """
    variant = config.variant
    n_windows, T, M = rollout.z.shape
    N = params.N
    x = rollout.window
    scale = 2.0 / (T * n_windows)
    centering = centering_matrix(M) if variant.mean_centered else None
    alpha_sum = params.alphas.sum()

    grads = {
        "A": np.zeros(M),
        "W": np.zeros((M, M)),
        "h0": np.zeros(M),
        "alphas": np.zeros(params.n_bases),
        "thresholds": np.zeros((params.n_bases, M)),
    }

    g_next = None
    for t in range(T - 1, -1, -1):
        g = np.zeros((n_windows, M))
        g[:, :N] = scale * (rollout.z[:, t, :N] - x[:, t])

        if g_next is not None:
            u = rollout.u[:, t]
            zf = rollout.z_forced[:, t]
            branches = np.maximum(0.0, u[:, None, :] - params.thresholds)
            phi = np.einsum("b,sbm->sm", params.alphas, branches)
            relu_u = np.maximum(0.0, u)
            if variant.clipped:
                phi = phi - alpha_sum * relu_u

            grads["A"] += np.sum(g_next * zf, axis=0)
            grads["W"] += g_next.T @ phi
            grads["h0"] += g_next.sum(axis=0)

            v = g_next @ params.W
            grads["alphas"] += np.einsum("sm,sbm->b", v, branches)
            if variant.clipped:
                grads["alphas"] -= np.sum(v * relu_u)
            active = (u[:, None, :] > params.thresholds).astype(np.float64)
            grads["thresholds"] -= params.alphas[:, None] * np.einsum("sm,sbm->bm", v, active)

            d_u = v * phi_derivative(u, params, variant.clipped)
            d_zf = g_next * params.A + (d_u @ centering if centering is not None else d_u)
            if rollout.forced[t]:
                d_zf[:, :N] = 0.0
            g += d_zf
        g_next = g

    grads["L"] = g_next[:, N:].T @ x[:, 0]
    np.fill_diagonal(grads["W"], 0.0)
    grads = {name: grads[name] for name in params.trainable_names}

    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise GradientError(name)
    return grads


def _regularized(config: TrainConfig, M: int) -> slice:
    return slice(M - config.m_reg, M)


def mar_penalty(params: DendParams, config: TrainConfig) -> float:
    """lambda * [sum (A_ii - 1)^2 + sum_{j != i} W_ij^2 + sum h_i^2] over the
    last m_reg latent states.
    """
    if config.lambda_mar == 0 or config.m_reg == 0:
        return 0.0
    reg = _regularized(config, params.M)
    return float(
        config.lambda_mar
        * (
            np.sum((params.A[reg] - 1.0) ** 2)
            + np.sum(params.W[reg] ** 2)
            + np.sum(params.h0[reg] ** 2)
        )
    )


def mar_gradient(params: DendParams, config: TrainConfig) -> dict[str, np.ndarray]:
    M = params.M
    grads = {"A": np.zeros(M), "W": np.zeros((M, M)), "h0": np.zeros(M)}
    if config.lambda_mar == 0 or config.m_reg == 0:
        return grads
    reg = _regularized(config, M)
    lam = config.lambda_mar
    grads["A"][reg] = 2 * lam * (params.A[reg] - 1.0)
    grads["W"][reg] = 2 * lam * params.W[reg]
    np.fill_diagonal(grads["W"], 0.0)
    grads["h0"][reg] = 2 * lam * params.h0[reg]
    return grads


def sample_windows(data: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    n_traj, T, _ = data.shape
    trajectories = rng.integers(0, n_traj, batch_size)
    starts = rng.integers(0, T - seq_len + 1, batch_size)
    return np.stack([data[k, s : s + seq_len] for k, s in zip(trajectories, starts)])


def _chunk_gradient(params: DendParams, config: TrainConfig, windows: np.ndarray):
    rollout = teacher_forced_rollout(params, config, windows)
    if not np.isfinite(rollout.loss):
        return rollout.loss, None, windows.shape[0]
    return rollout.loss, backward(params, config, rollout), windows.shape[0]


def batch_gradient(params: DendParams, config: TrainConfig, windows: np.ndarray, pool=None):
    """Mean loss and gradient over the windows, fanned out when a pool is given"""
    if pool is None:
        parts = [_chunk_gradient(params, config, windows)]
    else:
        chunks = [c for c in np.array_split(windows, config.n_workers) if len(c)]
        parts = pool.starmap(_chunk_gradient, [(params, config, c) for c in chunks])

    total = sum(count for _, _, count in parts)
    loss = sum(part_loss * count for part_loss, _, count in parts) / total
    if not np.isfinite(loss):
        return loss, None
    grads = {name: np.zeros_like(value) for name, value in parts[0][1].items()}
    for _, part_grads, count in parts:
        for name in grads:
            grads[name] += part_grads[name] * (count / total)
    return loss, grads


def train(
    data: TrajectoryBatch,
    config: TrainConfig,
    log: logging.Logger | None = None,
    params: DendParams | None = None,
    checkpoint_meta: dict | None = None,
) -> tuple[DendParams, list[dict]]:
    """Fit a dendPLRNN to data.

    Args:
        data (TrajectoryBatch): Standardized training series
        config (TrainConfig): Training settings
        log (logging.Logger): Logger
        params (DendParams): Starting point, drawn by init_params when None
        checkpoint_meta (dict): Extra metadata for periodic checkpoints

    Returns:
        tuple[DendParams, list[dict]]: Final parameters and per-epoch records
    """
    log = get_logger(log, "training")
    if data.T < config.seq_len:
        raise ConfigError(
            "training.seq_len",
            f"{config.seq_len} exceeds the training series length {data.T}",
        )
    if not data.standardized:
        log.warning("Training on unstandardized data")

    rng = np.random.default_rng(config.rng_seed)
    current = init_params(config, data, rng=rng, log=log) if params is None else params
    arrays = current.trainable()
    adam = AdamState.for_params(arrays)
    last_good = current
    records = []

    if config.log_path:
        Path(config.log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(config.log_path).write_text("")

    log.info(
        f"Training M={config.M} B={config.B_bases} tau={config.tau} for {config.epochs} epochs"
    )

    pool = mp.Pool(processes=config.n_workers) if config.n_workers > 1 else None
    try:
        for epoch in range(config.epochs):
            started = time.perf_counter()
            lr = config.learning_rate(epoch)
            losses, mars, norms = [], [], []

            for _ in range(config.batches_per_epoch):
                windows = sample_windows(data.data, config.seq_len, config.batch_size, rng)
                loss, grads = batch_gradient(current, config, windows, pool)
                mar = mar_penalty(current, config)
                if grads is None or not np.isfinite(loss + mar):
                    log.error(f"Loss became non-finite at epoch {epoch}, aborting")
                    raise TrainingDivergedError(epoch, last_good)

                for name, value in mar_gradient(current, config).items():
                    grads[name] += value
                norms.append(clip_by_global_norm(grads, config.gradient_clip_norm))
                adam.step(arrays, grads, lr)
                np.fill_diagonal(arrays["W"], 0.0)

                try:
                    current = current.with_arrays(**arrays)
                except ValueError:
                    log.error(f"Parameters became non-finite at epoch {epoch}, aborting")
                    raise TrainingDivergedError(epoch, last_good) from None
                losses.append(loss)
                mars.append(mar)

            last_good = current
            record = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "mar": float(np.mean(mars)),
                "lr": lr,
                "grad_norm": float(np.mean(norms)),
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
            records.append(record)
            log.debug(
                f"epoch {epoch}: loss={record['loss']:.6g} mar={record['mar']:.3g} lr={lr:.3g} grad_norm={record['grad_norm']:.3g}"
            )
            if config.log_path:
                append_jsonl(record, config.log_path)

            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                meta = dict(checkpoint_meta or {})
                meta["epoch"] = epoch + 1
                save_checkpoint(
                    Path(config.checkpoint_dir) / f"epoch_{epoch + 1:06d}.json",
                    current,
                    config.variant,
                    meta,
                )
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    log.info(f"Finished training, final loss {records[-1]['loss']:.6g}")
    return current, records
