"""The dendPLRNN latent map

    z' = A*z + W phi(z_hat) + h0 [+ C s] [+ eps]

with phi(z)_m = sum_b alpha_b max(0, z_m - h_{b,m}) and z_hat = z, or the
mean-centred M_c z. A is stored as the diagonal vector and W carries a hard
zero diagonal. Region indicators use the strict rule z_m > h_{b,m}.

A model with a fixed basis is the standard PLRNN: one untrained basis with
alpha = 1 and h = 0, so phi(z) = max(0, z). Training with B_bases = 0 builds
that model.
"""

from dataclasses import dataclass, replace

import numpy as np

from dendplrnn.utils.utils import DivergenceError

TRAINABLE = ("A", "W", "h0", "alphas", "thresholds", "L")
BASIS_BLOCKS = ("alphas", "thresholds")


@dataclass(frozen=True)
class Variant:
    clipped: bool = False
    mean_centered: bool = False

    def to_dict(self) -> dict:
        return {"clipped": self.clipped, "mean_centered": self.mean_centered}

    @classmethod
    def from_dict(cls, payload: dict) -> "Variant":
        return cls(
            clipped=bool(payload.get("clipped", False)),
            mean_centered=bool(payload.get("mean_centered", False)),
        )


PLAIN = Variant()


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DendParams:
    """All parameters of the latent and observation maps.

    Identity mapping is used when B_obs is None; n_obs then gives N and the
    first N latent states are read out directly. L maps x_1 to the initial
    values of the remaining M - N latent states. fixed_basis pins the basis
    to alpha = [1], h = 0 and keeps it out of training.
    """

    A: np.ndarray
    W: np.ndarray
    h0: np.ndarray
    alphas: np.ndarray
    thresholds: np.ndarray
    n_obs: int | None = None
    B_obs: np.ndarray | None = None
    L: np.ndarray | None = None
    C: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    Gamma: np.ndarray | None = None
    fixed_basis: bool = False

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(-1)
        M = A.shape[0]
        if M < 1:
            raise ValueError("latent dimension M must be at least 1")

        W = np.array(self.W, dtype=np.float64).reshape(M, M)
        np.fill_diagonal(W, 0.0)
        h0 = np.array(self.h0, dtype=np.float64).reshape(M)
        alphas = np.array(self.alphas, dtype=np.float64).reshape(-1)
        if self.fixed_basis and alphas.shape[0] == 0:
            alphas, thresholds = np.ones(1), np.zeros((1, M))
        else:
            thresholds = np.array(self.thresholds, dtype=np.float64).reshape(
                alphas.shape[0], M
            )
        if self.fixed_basis and not (
            alphas.shape == (1,) and alphas[0] == 1.0 and np.all(thresholds == 0.0)
        ):
            raise ValueError("a fixed basis must be the single ReLU basis alpha = 1, h = 0")

        if self.B_obs is None:
            N = M if self.n_obs is None else int(self.n_obs)
            if not 1 <= N <= M:
                raise ValueError(f"identity mapping requires 1 <= N <= M, got N={N}, M={M}")
            L = np.zeros((M - N, N)) if self.L is None else self.L
            L = np.array(L, dtype=np.float64).reshape(M - N, N)
            B_obs = None
        else:
            B_obs = np.array(self.B_obs, dtype=np.float64)
            if B_obs.ndim != 2 or B_obs.shape[1] != M:
                raise ValueError(f"B_obs must have shape [N][{M}], got {B_obs.shape}")
            N = B_obs.shape[0]
            L = None

        fields = {
            "A": A,
            "W": W,
            "h0": h0,
            "alphas": alphas,
            "thresholds": thresholds,
            "n_obs": N,
            "B_obs": B_obs,
            "L": L,
            "fixed_basis": bool(self.fixed_basis),
        }
        if self.C is not None:
            fields["C"] = np.array(self.C, dtype=np.float64).reshape(M, -1)
        if self.Sigma is not None:
            fields["Sigma"] = np.array(self.Sigma, dtype=np.float64).reshape(M)
        if self.Gamma is not None:
            fields["Gamma"] = np.array(self.Gamma, dtype=np.float64).reshape(N)

        for name, value in fields.items():
            if isinstance(value, np.ndarray):
                if not np.all(np.isfinite(value)):
                    raise ValueError(f"parameter block '{name}' has non-finite entries")
                value = _frozen(value)
            object.__setattr__(self, name, value)

        for name in ("Sigma", "Gamma"):
            value = getattr(self, name)
            if value is not None and np.any(value < 0):
                raise ValueError(f"{name} must be non-negative")

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.n_obs

    @property
    def n_bases(self) -> int:
        return self.alphas.shape[0]

    @property
    def identity_mapping(self) -> bool:
        return self.B_obs is None

    @property
    def trainable_names(self) -> tuple:
        if self.fixed_basis:
            return tuple(name for name in TRAINABLE if name not in BASIS_BLOCKS)
        return TRAINABLE

    def trainable(self) -> dict:
        """Writable copies of the trained blocks"""
        return {name: np.array(getattr(self, name)) for name in self.trainable_names}

    def with_arrays(self, **arrays) -> "DendParams":
        return replace(self, **arrays)


@dataclass(frozen=True, eq=False)
class RegionConfig:
    """Indicator stack d[b][m] = z_hat_m > h_{b,m}; the clipped variant also
    carries d0[m] = z_hat_m > 0.
    """

    d: np.ndarray
    d0: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "d", _frozen_bool(self.d))
        if self.d0 is not None:
            object.__setattr__(self, "d0", _frozen_bool(self.d0))

    @property
    def key(self) -> tuple:
        d0 = () if self.d0 is None else tuple(self.d0.tolist())
        return (self.d.shape, self.d.tobytes(), d0)

    def __eq__(self, other) -> bool:
        return isinstance(other, RegionConfig) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def to_dict(self) -> dict:
        out = {"d": self.d.astype(int).tolist()}
        if self.d0 is not None:
            out["d0"] = self.d0.astype(int).tolist()
        return out


def _frozen_bool(array) -> np.ndarray:
    out = np.array(array, dtype=bool)
    out.setflags(write=False)
    return out


def centering_matrix(M: int) -> np.ndarray:
    return np.eye(M) - np.full((M, M), 1.0 / M)


def preactivation(z, variant: Variant = PLAIN) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if variant.mean_centered:
        return z - z.mean(axis=-1, keepdims=True)
    return z


def phi_basis(z, params: DendParams, clipped: bool = False) -> np.ndarray:
    """Basis expansion sum_b alpha_b max(0, z - h_b), applied componentwise.

    The clipped form subtracts alpha_b max(0, z) inside every term. Any
    mean-centring is the caller's job (see step).
    """
    z = np.asarray(z, dtype=np.float64)
    branches = np.maximum(0.0, z[..., None, :] - params.thresholds)
    out = np.einsum("b,...bm->...m", params.alphas, branches)
    if clipped:
        out = out - params.alphas.sum() * np.maximum(0.0, z)
    return out


def phi_derivative(u, params: DendParams, clipped: bool = False) -> np.ndarray:
    """Slope of phi at u, with zero slope on a kink"""
    active = u[..., None, :] > params.thresholds
    slope = np.einsum("b,...bm->...m", params.alphas, active.astype(np.float64))
    if clipped:
        slope = slope - params.alphas.sum() * (u > 0)
    return slope


def step(
    z,
    params: DendParams,
    variant: Variant = PLAIN,
    s=None,
    rng: np.random.Generator | None = None,
    t: int = 0,
) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.M:
        raise ValueError(f"state has {z.shape[-1]} components, model has M={params.M}")

    u = preactivation(z, variant)
    z_next = params.A * z + phi_basis(u, params, variant.clipped) @ params.W.T + params.h0
    if s is not None:
        if params.C is None:
            raise ValueError("inputs given but the model has no input weights C")
        z_next = z_next + np.asarray(s, dtype=np.float64) @ params.C.T
    if rng is not None and params.Sigma is not None:
        z_next = z_next + params.Sigma * rng.standard_normal(z_next.shape)

    if not np.all(np.isfinite(z_next)):
        raise DivergenceError(t, "non-finite result of the latent step")
    return z_next


def simulate_free(
    z1,
    params: DendParams,
    variant: Variant = PLAIN,
    T: int = 1,
    inputs=None,
    rng: np.random.Generator | None = None,
    bound: float = 1e8,
) -> np.ndarray:
    """Iterate the map from z1 without forcing; returns [T][M] including z1"""
    z = np.asarray(z1, dtype=np.float64)
    if z.shape != (params.M,):
        raise ValueError(f"z1 must have shape ({params.M},), got {z.shape}")
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")

    trajectory = np.empty((T, params.M))
    trajectory[0] = z
    for t in range(1, T):
        s = None if inputs is None else inputs[t - 1]
        z = step(z, params, variant, s=s, rng=rng, t=t)
        if np.linalg.norm(z) > bound:
            raise DivergenceError(t, f"latent norm exceeded {bound:g}")
        trajectory[t] = z
    return trajectory


def observe(z_traj, params: DendParams, rng: np.random.Generator | None = None) -> np.ndarray:
    z_traj = np.asarray(z_traj, dtype=np.float64)
    if params.identity_mapping:
        x = z_traj[..., : params.N].copy()
    else:
        x = z_traj @ params.B_obs.T
    if rng is not None and params.Gamma is not None:
        x = x + params.Gamma * rng.standard_normal(x.shape)
    return x


def embed_observation(x, params: DendParams) -> np.ndarray:
    """Latent state [x, L x] for an observation under identity mapping"""
    if not params.identity_mapping:
        raise ValueError("embedding observations requires the identity mapping")
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, x @ params.L.T], axis=-1)


def region_of(z, params: DendParams, variant: Variant = PLAIN) -> RegionConfig:
    u = preactivation(z, variant)
    d = u[None, :] > params.thresholds
    d0 = u > 0 if variant.clipped else None
    return RegionConfig(d, d0)


def effective_slopes(region: RegionConfig, params: DendParams, variant: Variant = PLAIN) -> np.ndarray:
    """Diagonal of D^B = sum_b alpha_b D^(b) (minus (sum alpha) D^(0) when clipped)"""
    slopes = params.alphas @ region.d.astype(np.float64)
    if variant.clipped:
        if region.d0 is None:
            raise ValueError("clipped variant needs a region with d0 indicators")
        slopes = slopes - params.alphas.sum() * region.d0
    return slopes


def affine_form(
    region: RegionConfig, params: DendParams, variant: Variant = PLAIN
) -> tuple[np.ndarray, np.ndarray]:
    """Matrix and offset of the affine map z' = W^B z + offset valid on region"""
    slopes = effective_slopes(region, params, variant)
    matrix = params.W * slopes[None, :]
    if variant.mean_centered:
        matrix = matrix @ centering_matrix(params.M)
    matrix = matrix + np.diag(params.A)
    shifted = params.alphas @ (region.d * params.thresholds)
    offset = params.h0 - params.W @ shifted
    return matrix, offset


def jacobian(z, params: DendParams, variant: Variant = PLAIN) -> np.ndarray:
    return affine_form(region_of(z, params, variant), params, variant)[0]


def clipped_orbit_bound(params: DendParams, z1) -> float:
    """Bound on every orbit norm of the clipped map when max|A| < 1.

    Each clipped branch alpha_b [max(0, z - h_b) - max(0, z)] is bracketed by
    |alpha_b h_{b,m}|, which gives c_tilde = ||(sum_b |alpha_b h_{b,m}|)_m||.
    """
    norm_A = np.max(np.abs(params.A))
    if norm_A >= 1:
        raise ValueError(f"bound requires max|A| < 1, got {norm_A}")
    c_tilde = np.linalg.norm(np.abs(params.alphas) @ np.abs(params.thresholds))
    return (c_tilde * np.linalg.norm(params.W, 2) + np.linalg.norm(params.h0)) / (
        1.0 - norm_A
    ) + np.linalg.norm(z1)


@dataclass(frozen=True, eq=False)
class ExpandedPLRNN:
    """Conventional PLRNN z_hat' = A*z_hat + W relu(z_hat) + h0 on M*B states"""

    A: np.ndarray
    W: np.ndarray
    h0: np.ndarray
    shift: np.ndarray
    M: int
    C: np.ndarray | None = None

    def embed(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        copies = self.shift.shape[0] // self.M
        return np.tile(z, copies) - self.shift

    def project(self, z_hat) -> np.ndarray:
        return np.asarray(z_hat)[..., : self.M] + self.shift[: self.M]

    def step(self, z_hat, s=None) -> np.ndarray:
        out = self.A * z_hat + np.maximum(0.0, z_hat) @ self.W.T + self.h0
        if s is not None:
            out = out + np.asarray(s) @ self.C.T
        return out

    def simulate(self, z1, T: int) -> np.ndarray:
        """Free run from the original-space state z1, projected back"""
        z_hat = self.embed(z1)
        out = np.empty((T, self.M))
        out[0] = self.project(z_hat)
        for t in range(1, T):
            z_hat = self.step(z_hat)
            out[t] = self.project(z_hat)
        return out


def expand_to_plrnn(params: DendParams, variant: Variant = PLAIN) -> ExpandedPLRNN:
    """Rewrite the model as a PLRNN on B stacked, threshold-shifted copies of z"""
    if variant != PLAIN:
        raise ValueError("the PLRNN expansion is defined for the plain variant only")
    B = params.n_bases
    if B < 1:
        raise ValueError("the PLRNN expansion needs at least one basis")

    A_tilde = np.tile(params.A, B)
    block_row = np.concatenate([alpha * params.W for alpha in params.alphas], axis=1)
    W_tilde = np.tile(block_row, (B, 1))
    shift = params.thresholds.reshape(-1)
    h0_hat = (A_tilde - 1.0) * shift + np.tile(params.h0, B)
    C_tilde = None if params.C is None else np.tile(params.C, (B, 1))

    return ExpandedPLRNN(
        A=A_tilde, W=W_tilde, h0=h0_hat, shift=shift, M=params.M, C=C_tilde
    )


def random_params(
    M: int,
    B: int,
    rng: np.random.Generator,
    N: int | None = None,
    scale: float = 1.0,
    threshold_range: float = 1.0,
) -> DendParams:
    """Random model used by tests and untrained analysis runs: A in
    [-0.9, 0.9], W ~ N(0, scale**2/M), alphas ~ U[-1, 1], thresholds uniform
    in +-threshold_range, h0 ~ N(0, 0.1**2). B = 0 gives a standard PLRNN.
    """
    return DendParams(
        A=rng.uniform(-0.9, 0.9, M),
        W=rng.normal(0.0, scale / np.sqrt(M), (M, M)),
        h0=rng.normal(0.0, 0.1, M),
        alphas=rng.uniform(-1.0, 1.0, B),
        thresholds=rng.uniform(-threshold_range, threshold_range, (B, M)),
        n_obs=N,
        fixed_basis=B == 0,
    )
