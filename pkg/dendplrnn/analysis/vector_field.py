from dataclasses import dataclass
from pathlib import Path
import csv

import numpy as np

from dendplrnn.dynsys.systems import SystemSpec, flow_map
from dendplrnn.model.dendplrnn import (
    PLAIN,
    DendParams,
    Variant,
    embed_observation,
    observe,
    step,
)


@dataclass(frozen=True)
class FieldGrid:
    lower: tuple
    upper: tuple
    resolution: int = 20

    def points(self) -> np.ndarray:
        axes = [
            np.linspace(lo, hi, self.resolution) for lo, hi in zip(self.lower, self.upper)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, len(axes))


def vector_field(params: DendParams, grid: FieldGrid, variant: Variant = PLAIN) -> tuple[np.ndarray, np.ndarray]:
    """One-step displacement F(x) - x in observation space.

    Each grid point x is lifted to z = [x, L x], stepped once and read out.

    Returns:
        tuple[np.ndarray, np.ndarray]: grid points and displacements, both [G][N]
    """
    x = grid.points()
    if x.shape[1] != params.N:
        raise ValueError(f"grid is {x.shape[1]}-dimensional, model reads out N={params.N}")
    z_next = step(embed_observation(x, params), params, variant)
    return x, observe(z_next, params) - x


def ground_truth_field(spec: SystemSpec, grid: FieldGrid, n_substeps: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """One-sample-interval displacement of the noise-free true flow"""
    x = grid.points()
    if x.shape[1] != spec.dimension:
        raise ValueError(f"grid is {x.shape[1]}-dimensional, {spec.kind} has {spec.dimension}")
    return x, flow_map(spec, x, n_substeps) - x


def field_sign_agreement(field_a: np.ndarray, field_b: np.ndarray) -> float:
    """Fraction of (grid point, component) pairs whose displacements share a sign"""
    field_a = np.asarray(field_a)
    field_b = np.asarray(field_b)
    if field_a.shape != field_b.shape:
        raise ValueError(f"fields differ in shape: {field_a.shape} vs {field_b.shape}")
    return float(np.mean(np.sign(field_a) == np.sign(field_b)))


def write_field_csv(points: np.ndarray, displacement: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    N = points.shape[1]
    if N == 2:
        header = ["x", "y", "dx", "dy"]
    else:
        header = [f"x{i}" for i in range(N)] + [f"dx{i}" for i in range(N)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, d in zip(points, displacement):
            writer.writerow([repr(float(v)) for v in np.concatenate([p, d])])
