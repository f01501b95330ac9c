"""Ground-truth benchmark systems.

Every system is a vector field f(x) integrated with one fixed-step RK4 update
per sample interval (optionally split into substeps) plus an Euler-Maruyama
process-noise increment N(0, process_noise_std**2 * dt * I).
"""

from collections import namedtuple
from dataclasses import dataclass, field, replace
from functools import lru_cache
import copy
import logging

import numpy as np
from scipy import optimize
from scipy.special import expit

from dendplrnn.utils.utils import IntegrationError, get_logger

SYSTEM_PARAMETERS = {
    "lorenz63": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
    "lorenz96": {"F": 8.0, "N": 10},
    "bursting_neuron": {
        "C_m": 6.0,
        "g_L": 8.0,
        "E_L": -80.0,
        "g_Na": 20.0,
        "E_Na": 60.0,
        "V_hNa": -20.0,
        "k_Na": 15.0,
        "g_K": 10.0,
        "E_K": -90.0,
        "V_hK": -25.0,
        "k_K": 5.0,
        "tau_n": 1.0,
        "g_M": 25.0,
        "V_hM": -15.0,
        "k_M": 5.0,
        "tau_h": 200.0,
        "g_NMDA": 10.2,
        "E_NMDA": 0.0,
    },
    "neural_population": {"N": 50, "J1": 0.09, "seed": 35, "g": 2.0},
    "wilson_cowan": {
        "w_ee": 9.0,
        "w_ei": 9.0,
        "w_ie": 5.0,
        "w_ii": 5.0,
        "z_e": 3.0,
        "z_i": 4.0,
        "tau_e": 1.0,
        "tau_i": 1.0,
    },
}

DEFAULT_DT = {
    "lorenz63": 0.01,
    "lorenz96": 0.01,
    "bursting_neuron": 0.05,
    "neural_population": 0.1,
    "wilson_cowan": 0.1,
}

DEFAULT_PROCESS_NOISE = {
    "lorenz63": 0.01,
    "lorenz96": 0.01,
    "bursting_neuron": 0.0,
    "neural_population": 0.0,
    "wilson_cowan": 0.0,
}

# parameters that are counts, not reals
INTEGER_PARAMETERS = {"N", "seed"}

flow_fixed_point = namedtuple(
    "flow_fixed_point", ["state", "eigenvalues", "stability"]
)


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: dict
    dt: float
    process_noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in SYSTEM_PARAMETERS:
            raise ValueError(
                f"unknown system kind '{self.kind}', expected one of {sorted(SYSTEM_PARAMETERS)}"
            )
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.process_noise_std >= 0:
            raise ValueError(
                f"process_noise_std must be >= 0, got {self.process_noise_std}"
            )

        required = set(SYSTEM_PARAMETERS[self.kind])
        given = set(self.params)
        if given != required:
            missing = sorted(required - given)
            extra = sorted(given - required)
            raise ValueError(
                f"parameters for '{self.kind}' do not match: missing {missing}, unexpected {extra}"
            )

        params = {}
        for name, value in self.params.items():
            params[name] = int(value) if name in INTEGER_PARAMETERS else float(value)
            if not np.isfinite(params[name]):
                raise ValueError(f"parameter '{name}' is not finite")
        object.__setattr__(self, "params", params)

    @property
    def dimension(self) -> int:
        if self.kind in ("lorenz96", "neural_population"):
            return self.params["N"]
        if self.kind == "wilson_cowan":
            return 2
        return 3

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "dt": self.dt,
            "process_noise_std": self.process_noise_std,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SystemSpec":
        return cls(
            kind=payload["kind"],
            params=payload["params"],
            dt=payload["dt"],
            process_noise_std=payload.get("process_noise_std", 0.0),
        )


@dataclass
class TrajectoryBatch:
    """Time series of shape [n_trajectories][T][N] with preprocessing state"""

    data: np.ndarray
    dt: float = 1.0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(
                f"trajectory data must have shape [n][T][N], got {data.shape}"
            )
        self.data = data
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)
            self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    @property
    def n_trajectories(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def N(self) -> int:
        return self.data.shape[2]

    def pooled(self) -> np.ndarray:
        return self.data.reshape(-1, self.N)

    def derive(self, data: np.ndarray, step: dict | None = None, **changes):
        """New batch with replaced data, recording a preprocessing step"""
        provenance = copy.deepcopy(self.provenance)
        if step is not None:
            provenance.setdefault("steps", []).append(step)
        return replace(self, data=data, provenance=provenance, **changes)


def default_system_spec(kind: str, **overrides) -> SystemSpec:
    if kind not in SYSTEM_PARAMETERS:
        raise ValueError(f"unknown system kind '{kind}'")
    params = dict(SYSTEM_PARAMETERS[kind])
    params.update(overrides.pop("params", {}))
    return SystemSpec(
        kind=kind,
        params=params,
        dt=overrides.pop("dt", DEFAULT_DT[kind]),
        process_noise_std=overrides.pop(
            "process_noise_std", DEFAULT_PROCESS_NOISE[kind]
        ),
    )


def default_initial_state(spec: SystemSpec) -> np.ndarray:
    p = spec.params
    if spec.kind == "lorenz63":
        return np.array([-8.0, 7.0, 27.0])
    if spec.kind == "lorenz96":
        x0 = np.full(p["N"], p["F"])
        x0[0] += 0.01
        return x0
    if spec.kind == "bursting_neuron":
        return np.array([-60.0, 0.01, 0.01])
    if spec.kind == "neural_population":
        return np.random.default_rng([p["seed"], 1]).standard_normal(p["N"])
    return np.array([0.1, 0.1])


@lru_cache(maxsize=8)
def population_coupling(N: int, J1: float, g: float, seed: int) -> np.ndarray:
    """Random Gaussian coupling with variance g**2/N plus the rank-1 term
    (J1/sqrt(N)) xi v^T, all drawn from one generator seeded with seed.
    """
    rng = np.random.default_rng(seed)
    random_part = rng.normal(0.0, g / np.sqrt(N), size=(N, N))
    xi = rng.standard_normal(N)
    v = rng.standard_normal(N)
    coupling = random_part + (J1 / np.sqrt(N)) * np.outer(xi, v)
    coupling.setflags(write=False)
    return coupling


def make_drift(spec: SystemSpec):
    """Return f(x) for the system; x may carry leading batch axes"""
    p = spec.params

    if spec.kind == "lorenz63":
        sigma, rho, beta = p["sigma"], p["rho"], p["beta"]

        def f(x):
            return np.stack(
                [
                    sigma * (x[..., 1] - x[..., 0]),
                    x[..., 0] * (rho - x[..., 2]) - x[..., 1],
                    x[..., 0] * x[..., 1] - beta * x[..., 2],
                ],
                axis=-1,
            )

    elif spec.kind == "lorenz96":
        forcing = p["F"]

        def f(x):
            return (
                (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1))
                * np.roll(x, 1, axis=-1)
                - x
                + forcing
            )

    elif spec.kind == "bursting_neuron":

        def f(x):
            V, n, h = x[..., 0], x[..., 1], x[..., 2]
            m_inf = expit((V - p["V_hNa"]) / p["k_Na"])
            n_inf = expit((V - p["V_hK"]) / p["k_K"])
            h_inf = expit((V - p["V_hM"]) / p["k_M"])
            nmda_gate = 1.0 / (1.0 + 0.33 * np.exp(-0.0625 * V))
            current = (
                p["g_L"] * (V - p["E_L"])
                + p["g_Na"] * m_inf * (V - p["E_Na"])
                + p["g_K"] * n * (V - p["E_K"])
                + p["g_M"] * h * (V - p["E_K"])
                + p["g_NMDA"] * nmda_gate * (V - p["E_NMDA"])
            )
            return np.stack(
                [
                    -current / p["C_m"],
                    (n_inf - n) / p["tau_n"],
                    (h_inf - h) / p["tau_h"],
                ],
                axis=-1,
            )

    elif spec.kind == "neural_population":
        coupling = population_coupling(p["N"], p["J1"], p["g"], p["seed"])

        def f(x):
            return -x + np.tanh(x) @ coupling.T

    else:

        def f(x):
            r_e, r_i = x[..., 0], x[..., 1]
            dr_e = (
                -r_e + expit(p["w_ee"] * r_e - p["w_ei"] * r_i - p["z_e"])
            ) / p["tau_e"]
            dr_i = (
                -r_i + expit(p["w_ie"] * r_e - p["w_ii"] * r_i - p["z_i"])
            ) / p["tau_i"]
            return np.stack([dr_e, dr_i], axis=-1)

    return f


def drift(spec: SystemSpec, state) -> np.ndarray:
    return make_drift(spec)(np.asarray(state, dtype=np.float64))


def rk4_step(f, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_many(
    spec: SystemSpec,
    initial_states,
    T: int,
    rng_seed: int = 0,
    n_substeps: int = 1,
    log: logging.Logger | None = None,
) -> TrajectoryBatch:
    """Integrate K trajectories in lockstep.

    Args:
        spec (SystemSpec): System to integrate
        initial_states (array): Shape [K][N]
        T (int): Number of returned states per trajectory, including the first
        rng_seed (int): Seed for the process-noise generator
        n_substeps (int): RK4 substeps per sample interval

    Returns:
        TrajectoryBatch: Shape [K][T][N]
    """
    log = get_logger(log, "dynsys")
    x = np.array(initial_states, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.dimension:
        raise ValueError(
            f"initial states must have shape [K][{spec.dimension}] for {spec.kind}, got {x.shape}"
        )
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if n_substeps < 1:
        raise ValueError(f"n_substeps must be >= 1, got {n_substeps}")

    f = make_drift(spec)
    rng = np.random.default_rng(rng_seed)
    h = spec.dt / n_substeps
    noise_scale = spec.process_noise_std * np.sqrt(spec.dt)

    out = np.empty((x.shape[0], T, x.shape[1]))
    out[:, 0] = x
    for t in range(1, T):
        for _ in range(n_substeps):
            x = rk4_step(f, x, h)
        if noise_scale > 0:
            x = x + noise_scale * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(t)
        out[:, t] = x

    log.debug(f"Simulated {x.shape[0]} x {T} steps of {spec.kind}")

    return TrajectoryBatch(
        data=out,
        dt=spec.dt,
        provenance={
            "source": "simulation",
            "system": spec.to_dict(),
            "rng_seed": int(rng_seed),
            "n_substeps": int(n_substeps),
            "steps": [],
        },
    )


def simulate(
    spec: SystemSpec,
    initial_state,
    T: int,
    rng_seed: int = 0,
    n_substeps: int = 1,
    log: logging.Logger | None = None,
) -> TrajectoryBatch:
    initial_state = np.asarray(initial_state, dtype=np.float64)
    if initial_state.shape != (spec.dimension,):
        raise ValueError(
            f"initial state has shape {initial_state.shape}, {spec.kind} needs ({spec.dimension},)"
        )
    return simulate_many(
        spec, initial_state[None], T, rng_seed=rng_seed, n_substeps=n_substeps, log=log
    )


def flow_map(spec: SystemSpec, states, n_substeps: int = 1) -> np.ndarray:
    """Noise-free one-sample-interval image of each state"""
    f = make_drift(spec)
    x = np.asarray(states, dtype=np.float64)
    h = spec.dt / n_substeps
    for _ in range(n_substeps):
        x = rk4_step(f, x, h)
    return x


def largest_lyapunov(
    spec: SystemSpec,
    initial_state,
    n_steps: int = 20000,
    transient: int = 1000,
    d0: float = 1e-8,
    renorm_every: int = 10,
    rng_seed: int = 0,
) -> float:
    """Largest Lyapunov exponent (per model time unit) from the divergence of
    two nearby noise-free trajectories, renormalised every renorm_every steps.
    """
    f = make_drift(spec)
    x = np.asarray(initial_state, dtype=np.float64).copy()
    for _ in range(transient):
        x = rk4_step(f, x, spec.dt)

    direction = np.random.default_rng(rng_seed).standard_normal(x.shape)
    y = x + d0 * direction / np.linalg.norm(direction)

    log_growth = 0.0
    n_blocks = n_steps // renorm_every
    for _ in range(n_blocks):
        for _ in range(renorm_every):
            x = rk4_step(f, x, spec.dt)
            y = rk4_step(f, y, spec.dt)
        d = np.linalg.norm(y - x)
        if not np.isfinite(d) or d == 0:
            raise IntegrationError(n_blocks * renorm_every, "separation degenerate")
        log_growth += np.log(d / d0)
        y = x + (y - x) * (d0 / d)

    return log_growth / (n_blocks * renorm_every * spec.dt)


def _fd_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    n = x.shape[0]
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        jac[:, j] = (f(x + e) - f(x - e)) / (2 * eps)
    return jac


def vector_field_roots(
    spec: SystemSpec,
    lower,
    upper,
    resolution: int = 10,
    tol: float = 1e-10,
) -> list:
    """Zeros of the continuous vector field found from a grid of starts.

    Returns:
        list[flow_fixed_point]: de-duplicated roots inside the box, each with
        Jacobian eigenvalues and a stable/unstable/saddle label
    """
    f = make_drift(spec)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lower, upper)]
    starts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(
        -1, len(axes)
    )
    span = upper - lower

    roots = []
    for start in starts:
        solution = optimize.root(f, start, method="hybr")
        x = solution.x
        if not solution.success or np.linalg.norm(f(x)) > tol:
            continue
        if np.any(x < lower - 0.1 * span) or np.any(x > upper + 0.1 * span):
            continue
        if any(np.linalg.norm(x - r.state) < 1e-6 for r in roots):
            continue

        eigenvalues = np.linalg.eigvals(_fd_jacobian(f, x))
        if np.all(eigenvalues.real < 0):
            stability = "stable"
        elif np.all(eigenvalues.real > 0):
            stability = "unstable"
        else:
            stability = "saddle"
        roots.append(flow_fixed_point(x, eigenvalues, stability))

    return sorted(roots, key=lambda r: tuple(r.state))
