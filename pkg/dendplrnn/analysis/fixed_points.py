"""Fixed points and cycles of the piecewise-affine map.

On a region r the map is z' = W_r z + c_r, so a fixed point solves
(I - W_r) z = c_r and a period-n cycle through regions r_0..r_{n-1} solves
the same equation for the composed map. A solution counts only when it lies
in the region(s) assumed for it.
"""

from collections import Counter
from dataclasses import dataclass, field
import itertools
import logging

import numpy as np

from dendplrnn.model.dendplrnn import (
    PLAIN,
    DendParams,
    RegionConfig,
    Variant,
    affine_form,
    preactivation,
    region_of,
    simulate_free,
    step,
)
from dendplrnn.utils.utils import DivergenceError, get_logger

MAX_EXHAUSTIVE = 10**6
RCOND_MIN = 1e-12
DEDUP_TOL = 1e-6
RESIDUAL_TOL = 1e-8
MARGINAL_TOL = 1e-6


@dataclass
class FixedPointResult:
    z_star: np.ndarray
    region: RegionConfig
    eigenvalues: np.ndarray
    stability: str
    residual: float

    def to_dict(self) -> dict:
        return {
            "z_star": self.z_star.tolist(),
            "region": self.region.to_dict(),
            "eigenvalues": [[float(e.real), float(e.imag)] for e in self.eigenvalues],
            "spectral_radius": float(np.max(np.abs(self.eigenvalues))),
            "stability": self.stability,
            "residual": self.residual,
        }


@dataclass
class CycleResult:
    period: int
    points: np.ndarray
    regions: list
    eigenvalues: np.ndarray
    stability: str
    residual: float

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "points": self.points.tolist(),
            "regions": [r.to_dict() for r in self.regions],
            "eigenvalues": [[float(e.real), float(e.imag)] for e in self.eigenvalues],
            "stability": self.stability,
            "residual": self.residual,
        }


@dataclass
class SearchDiagnostics:
    candidates: int = 0
    virtual: int = 0
    ill_conditioned: list = field(default_factory=list)


def classify(eigenvalues: np.ndarray) -> str:
    moduli = np.abs(eigenvalues)
    if np.any(np.abs(moduli - 1.0) < MARGINAL_TOL):
        return "marginal"
    if np.all(moduli < 1.0):
        return "stable"
    if np.all(moduli > 1.0):
        return "unstable"
    return "saddle"


def count_theoretical_regions(M: int, B: int) -> tuple[int, int]:
    """(B+1)^M linear sub-regions separated by M*B*(B+1)^(M-1) borders"""
    if M < 1 or B < 0:
        raise ValueError(f"need M >= 1 and B >= 0, got M={M}, B={B}")
    return (B + 1) ** M, M * B * (B + 1) ** (M - 1)


def region_census(params: DendParams, trajectory, variant: Variant = PLAIN) -> Counter:
    """Visit counts per RegionConfig along a latent trajectory [T][M]"""
    census = Counter()
    for z in np.asarray(trajectory, dtype=np.float64):
        census[region_of(z, params, variant)] += 1
    return census


def _breakpoints(params: DendParams, variant: Variant) -> list[np.ndarray]:
    points = []
    for m in range(params.M):
        values = params.thresholds[:, m]
        if variant.clipped:
            values = np.append(values, 0.0)
        points.append(np.unique(values))
    return points


def _level_value(breaks: np.ndarray, level: int) -> float:
    """A coordinate strictly inside the level-th interval between breakpoints"""
    if breaks.shape[0] == 0:
        return 0.0
    if level == 0:
        return breaks[0] - 1.0
    if level == breaks.shape[0]:
        return breaks[-1] + 1.0
    return 0.5 * (breaks[level - 1] + breaks[level])


def _region_from_u(u: np.ndarray, params: DendParams, variant: Variant) -> RegionConfig:
    d = u[None, :] > params.thresholds
    return RegionConfig(d, u > 0 if variant.clipped else None)


def enumerate_regions(params: DendParams, variant: Variant = PLAIN) -> list[RegionConfig]:
    """Every indicator pattern that ordered thresholds allow, per dimension"""
    breaks = _breakpoints(params, variant)
    total = int(np.prod([b.shape[0] + 1 for b in breaks]))
    if total > MAX_EXHAUSTIVE:
        raise ValueError(
            f"exhaustive search would visit {total} regions (limit {MAX_EXHAUSTIVE}), use seeded search"
        )
    values = [[_level_value(b, k) for k in range(b.shape[0] + 1)] for b in breaks]
    return [
        _region_from_u(np.array(u), params, variant) for u in itertools.product(*values)
    ]


def _neighbour_regions(z: np.ndarray, params: DendParams, variant: Variant) -> list[RegionConfig]:
    u = preactivation(z, variant)
    breaks = _breakpoints(params, variant)
    out = []
    for m, b in enumerate(breaks):
        level = int(np.sum(b < u[m]))
        for k in (level - 1, level + 1):
            if 0 <= k <= b.shape[0]:
                moved = u.copy()
                moved[m] = _level_value(b, k)
                out.append(_region_from_u(moved, params, variant))
    return out


def _regions_of_states(states: np.ndarray, params: DendParams, variant: Variant) -> list[RegionConfig]:
    u = preactivation(states, variant)
    bits = (u[:, None, :] > params.thresholds).reshape(states.shape[0], -1)
    if variant.clipped:
        bits = np.concatenate([bits, u > 0], axis=1)
    unique_bits = np.unique(bits, axis=0)
    B, M = params.thresholds.shape
    regions = []
    for row in unique_bits:
        d = row[: B * M].reshape(B, M)
        d0 = row[B * M :] if variant.clipped else None
        regions.append(RegionConfig(d, d0))
    return regions


def _solve_refined(system: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Linear solve with one round of iterative refinement"""
    z = np.linalg.solve(system, rhs)
    return z + np.linalg.solve(system, rhs - system @ z)


def solve_region(
    region: RegionConfig,
    params: DendParams,
    variant: Variant,
    diagnostics: SearchDiagnostics,
) -> FixedPointResult | None:
    matrix, offset = affine_form(region, params, variant)
    system = np.eye(params.M) - matrix
    diagnostics.candidates += 1

    with np.errstate(divide="ignore"):
        rcond = 1.0 / np.linalg.cond(system)
    if not rcond > RCOND_MIN:
        diagnostics.ill_conditioned.append(
            {"region": region.to_dict(), "rcond": float(rcond), "kind": "marginal/bifurcation"}
        )
        return None

    z_star = _solve_refined(system, offset)
    if region_of(z_star, params, variant) != region:
        diagnostics.virtual += 1
        return None

    residual = float(np.linalg.norm(step(z_star, params, variant) - z_star))
    if residual >= RESIDUAL_TOL:
        diagnostics.virtual += 1
        return None

    eigenvalues = np.linalg.eigvals(matrix)
    return FixedPointResult(
        z_star=z_star,
        region=region,
        eigenvalues=eigenvalues,
        stability=classify(eigenvalues),
        residual=residual,
    )


def _is_new(z: np.ndarray, found: list) -> bool:
    return all(np.linalg.norm(z - r.z_star) >= DEDUP_TOL for r in found)


def _seed_box(params: DendParams, variant: Variant, trajectories) -> tuple[np.ndarray, np.ndarray]:
    if trajectories:
        stacked = np.concatenate([np.asarray(t).reshape(-1, params.M) for t in trajectories])
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    else:
        spread = np.abs(params.thresholds).max() if params.n_bases else 1.0
        spread = max(spread, float(np.abs(params.h0).max()), 1.0)
        lo, hi = np.full(params.M, -spread), np.full(params.M, spread)
    centre, half = 0.5 * (lo + hi), 0.75 * (hi - lo)
    half = np.maximum(half, 1e-3)
    return centre - half, centre + half


def find_fixed_points(
    params: DendParams,
    variant: Variant = PLAIN,
    search: str = "exhaustive",
    n_seeds: int = 1000,
    trajectories: list | None = None,
    rng_seed: int = 0,
    max_rounds: int = 50,
    log: logging.Logger | None = None,
) -> tuple[list[FixedPointResult], SearchDiagnostics]:
    """Locate fixed points region by region.

    Args:
        search (str): "exhaustive" visits every region; "seeded" harvests
            regions from trajectories, n_seeds uniform states in the data box
            enlarged 1.5 times, and neighbours of every solution found
        trajectories (list): latent trajectories [T][M] to harvest from

    Returns:
        tuple[list[FixedPointResult], SearchDiagnostics]
    """
    log = get_logger(log, "analysis")
    diagnostics = SearchDiagnostics()
    found = []

    if search == "exhaustive":
        for region in enumerate_regions(params, variant):
            result = solve_region(region, params, variant, diagnostics)
            if result is not None and _is_new(result.z_star, found):
                found.append(result)

    elif search == "seeded":
        if not trajectories and n_seeds < 1:
            raise ValueError("seeded search needs seed states or trajectories")
        lo, hi = _seed_box(params, variant, trajectories)
        seeds = np.random.default_rng(rng_seed).uniform(lo, hi, (n_seeds, params.M))
        pool = [seeds] + [np.asarray(t).reshape(-1, params.M) for t in (trajectories or [])]
        queue = _regions_of_states(np.concatenate(pool), params, variant)
        seen = set(queue)

        for _ in range(max_rounds):
            new_results = []
            for region in queue:
                result = solve_region(region, params, variant, diagnostics)
                if result is not None and _is_new(result.z_star, found):
                    found.append(result)
                    new_results.append(result)
            queue = []
            for result in new_results:
                for region in _neighbour_regions(result.z_star, params, variant):
                    if region not in seen:
                        seen.add(region)
                        queue.append(region)
            if not queue:
                break
    else:
        raise ValueError(f"unknown search mode '{search}'")

    log.info(
        f"{search} fixed-point search: {diagnostics.candidates} regions, {len(found)} fixed points, {len(diagnostics.ill_conditioned)} ill-conditioned"
    )
    found.sort(key=lambda r: tuple(r.z_star))
    return found, diagnostics


def fixed_points(params: DendParams, variant: Variant = PLAIN, search: str = "exhaustive", **kwargs) -> list[FixedPointResult]:
    return find_fixed_points(params, variant, search, **kwargs)[0]


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n) if n % d == 0]


def solve_sequence(
    regions: list,
    params: DendParams,
    variant: Variant = PLAIN,
    diagnostics: SearchDiagnostics | None = None,
) -> CycleResult | None:
    """Period-n orbit through the given region sequence, if one exists"""
    diagnostics = SearchDiagnostics() if diagnostics is None else diagnostics
    n = len(regions)
    product = np.eye(params.M)
    offset = np.zeros(params.M)
    for region in regions:
        matrix, c = affine_form(region, params, variant)
        product = matrix @ product
        offset = matrix @ offset + c
    diagnostics.candidates += 1

    system = np.eye(params.M) - product
    with np.errstate(divide="ignore"):
        rcond = 1.0 / np.linalg.cond(system)
    if not rcond > RCOND_MIN:
        diagnostics.ill_conditioned.append(
            {"regions": [r.to_dict() for r in regions], "rcond": float(rcond), "kind": "marginal/bifurcation"}
        )
        return None

    z = _solve_refined(system, offset)
    points = np.empty((n + 1, params.M))
    points[0] = z
    for k, region in enumerate(regions):
        if region_of(points[k], params, variant) != region:
            diagnostics.virtual += 1
            return None
        points[k + 1] = step(points[k], params, variant)

    residual = float(np.linalg.norm(points[n] - points[0]))
    if residual >= RESIDUAL_TOL:
        diagnostics.virtual += 1
        return None
    for d in _divisors(n):
        if np.linalg.norm(points[d] - points[0]) < DEDUP_TOL * max(1.0, float(np.linalg.norm(z))):
            return None

    eigenvalues = np.linalg.eigvals(product)
    return CycleResult(
        period=n,
        points=points[:n],
        regions=list(regions),
        eigenvalues=eigenvalues,
        stability=classify(eigenvalues),
        residual=residual,
    )


def _canonical(keys: tuple) -> tuple:
    return min(keys[i:] + keys[:i] for i in range(len(keys)))


def _is_new_cycle(cycle: CycleResult, found: list) -> bool:
    for other in found:
        if other.period != cycle.period:
            continue
        if np.min(np.linalg.norm(other.points - cycle.points[0], axis=1)) < DEDUP_TOL:
            return False
    return True


def _harvest_sequences(trajectory: np.ndarray, n: int, params: DendParams, variant: Variant, sequences: dict) -> None:
    regions = [region_of(z, params, variant) for z in trajectory]
    for start in range(len(regions) - n + 1):
        window = tuple(regions[start : start + n])
        key = _canonical(tuple(r.key for r in window))
        if key not in sequences:
            sequences[key] = list(window)


def k_cycles(
    params: DendParams,
    variant: Variant = PLAIN,
    n: int = 2,
    search: str = "seeded",
    trajectories: list | None = None,
    n_seeds: int = 20,
    burn_in: int = 500,
    run_length: int = 500,
    max_candidates: int = 20000,
    rng_seed: int = 0,
    log: logging.Logger | None = None,
) -> list[CycleResult]:
    """Period-n cycles (n >= 2), excluding orbits whose true period divides n.

    Seeded search collects region sequences of length n along the given
    trajectories and along free runs from n_seeds random starts; exhaustive
    search tries every sequence of enumerable regions.
    """
    log = get_logger(log, "analysis")
    if n < 2:
        raise ValueError(f"cycle period must be >= 2, got {n}")
    diagnostics = SearchDiagnostics()

    if search == "exhaustive":
        regions = enumerate_regions(params, variant)
        if len(regions) ** n > MAX_EXHAUSTIVE:
            raise ValueError(
                f"exhaustive {n}-cycle search would try {len(regions) ** n} sequences, use seeded search"
            )
        sequences = {}
        for window in itertools.product(regions, repeat=n):
            key = _canonical(tuple(r.key for r in window))
            sequences.setdefault(key, list(window))
    elif search == "seeded":
        sequences = {}
        for trajectory in trajectories or []:
            _harvest_sequences(np.asarray(trajectory), n, params, variant, sequences)
        lo, hi = _seed_box(params, variant, trajectories)
        rng = np.random.default_rng(rng_seed)
        for _ in range(n_seeds):
            try:
                run = simulate_free(rng.uniform(lo, hi), params, variant, burn_in + run_length)
            except DivergenceError:
                continue
            _harvest_sequences(run[burn_in:], n, params, variant, sequences)
    else:
        raise ValueError(f"unknown search mode '{search}'")

    found = []
    for key in sorted(sequences)[:max_candidates]:
        cycle = solve_sequence(sequences[key], params, variant, diagnostics)
        if cycle is not None and _is_new_cycle(cycle, found):
            found.append(cycle)

    log.info(
        f"{search} {n}-cycle search: {diagnostics.candidates} sequences, {len(found)} cycles"
    )
    return found
