import math
from typing import Iterable, List, Optional, Sequence

import numpy as np

DEFAULT_BOX_HALF_WIDTH = 6.0
POINTS_PER_AXIS = 64
MC_VALIDATION_POINTS = 4096
ANCHOR_COUNT = 241
TABLE_FIRST_NODE = 1e-3
TABLE_GEOMETRIC_NODES = 600
TABLE_DENSE_NODES = 4000


def validation_grid(
    dim: int,
    half_width: float = DEFAULT_BOX_HALF_WIDTH,
    points_per_axis: int = POINTS_PER_AXIS,
    n_random: int = MC_VALIDATION_POINTS,
    seed: int = 0,
) -> np.ndarray:
    """Points of the box [-L, L]^d: a tensor grid for d <= 2, seeded uniform samples above."""
    if dim < 1:
        raise ValueError("dimension must be at least 1.")
    if dim <= 2:
        axis = np.linspace(-half_width, half_width, points_per_axis)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)
    rng = np.random.default_rng([seed, dim])
    return rng.uniform(-half_width, half_width, size=(n_random, dim))


def step_count(horizon: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive.")
    if horizon < 0:
        raise ValueError("horizon must be non-negative.")
    if horizon == 0:
        return 0
    return max(1, int(math.ceil(horizon / dt - 1e-9)))


def time_grid(horizon: float, dt: float) -> np.ndarray:
    """Uniform grid on [0, horizon] whose step is the largest value <= dt dividing the horizon."""
    n_steps = step_count(horizon, dt)
    if n_steps == 0:
        return np.zeros(1)
    return np.linspace(0.0, horizon, n_steps + 1)


def record_indices(record_times: Iterable[float], t0: float, step: float, n_steps: int) -> List[int]:
    indices = []
    for t in record_times:
        if n_steps == 0:
            if abs(t - t0) > 1e-12:
                raise ValueError(f"record time {t} outside a zero-length window.")
            indices.append(0)
            continue
        k = int(round((t - t0) / step))
        if k < 0 or k > n_steps or abs(t0 + k * step - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"record time {t} is not on the step grid (step {step:.6g}).")
        indices.append(k)
    return indices


def anchor_grid(half_width: float = DEFAULT_BOX_HALF_WIDTH, count: int = ANCHOR_COUNT, dim: int = 1) -> np.ndarray:
    axis = np.linspace(-half_width, half_width, count)
    if dim == 1:
        return axis[:, None]
    if dim == 2:
        mesh = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)
    raise ValueError("dense anchor grids are limited to d <= 2.")


def table_grid(cap: float, must_include: Sequence[float] = (), dense_upto: Optional[float] = None) -> np.ndarray:
    """Non-uniform r-grid on [0, cap]: geometric from TABLE_FIRST_NODE plus a dense uniform block.

    The dense block covers [0, dense_upto] where the profile integrands bend; every value of
    must_include is inserted exactly and nearby nodes are dropped so spacings stay well conditioned.
    """
    if cap <= 0:
        raise ValueError("table cap must be positive.")
    dense_upto = min(cap, dense_upto if dense_upto is not None else cap)
    nodes = np.concatenate(
        [
            [0.0],
            np.geomspace(TABLE_FIRST_NODE, cap, TABLE_GEOMETRIC_NODES),
            np.linspace(0.0, dense_upto, TABLE_DENSE_NODES),
        ]
    )
    nodes = np.unique(nodes)
    keep = [float(r) for r in must_include if 0.0 < r < cap]
    min_gap = 1e-6
    for r in keep:
        nodes = nodes[np.abs(nodes - r) > min_gap * max(1.0, r)]
    nodes = np.unique(np.concatenate([nodes, keep, [cap]]))
    gaps = np.diff(nodes)
    tight = np.concatenate([[False], gaps < min_gap * np.maximum(1.0, nodes[1:])])
    protected = np.isin(nodes, keep) | (nodes == 0.0) | (nodes == cap)
    return nodes[~tight | protected]
