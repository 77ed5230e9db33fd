import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, TypeVar

import numpy as np

BLOCK_SIZE = 4096
NOISE_CHUNK = 256
THREADS_ENV_VAR = "COUPLING_LAB_THREADS"
DEFAULT_MAX_THREADS = 4

logger = logging.getLogger(__name__)
_worker_cap: Optional[int] = None
_worker_cap_lock = threading.Lock()

T = TypeVar("T")


def set_worker_cap(threads: Optional[int]) -> None:
    """Override the worker count for this process; None restores the environment default."""
    global _worker_cap
    with _worker_cap_lock:
        _worker_cap = None if threads is None else max(1, int(threads))


def worker_count() -> int:
    with _worker_cap_lock:
        if _worker_cap is not None:
            return _worker_cap
    default = min(DEFAULT_MAX_THREADS, os.cpu_count() or 1)
    raw = os.getenv(THREADS_ENV_VAR)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(
            "Invalid %s value %r; falling back to default %s workers.",
            THREADS_ENV_VAR,
            raw,
            default,
        )
        return default
    if value < 1:
        logger.warning("%s must be positive, got %s; using 1 worker.", THREADS_ENV_VAR, value)
        return 1
    return value


def block_slices(n_paths: int, block_size: int = BLOCK_SIZE) -> List[Tuple[int, slice]]:
    if n_paths < 0:
        raise ValueError("n_paths must be non-negative.")
    return [
        (index, slice(start, min(start + block_size, n_paths)))
        for index, start in enumerate(range(0, n_paths, block_size))
    ]


def keyed_generator(*key: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def path_generator(base_seed: int, path_index: int) -> np.random.Generator:
    """The stream of one path, keyed by (base_seed, path_index)."""
    return keyed_generator(base_seed, path_index)


def stream_ids(base_seed: int, sl: slice) -> np.ndarray:
    """(base_seed, path_index) keys of the streams behind paths sl.start .. sl.stop - 1."""
    index = np.arange(sl.start, sl.stop, dtype=np.int64)
    return np.stack([np.full_like(index, int(base_seed)), index], axis=-1)


class PathNoise:
    """Standard normal increments for paths [start, stop), each read from its own path stream.

    Draws are taken NOISE_CHUNK steps at a time per path, so path i sees the same increments
    whatever the block layout or the total number of paths.
    """

    def __init__(self, base_seed: int, sl: slice, dim: int, chunk: int = NOISE_CHUNK):
        if chunk < 1:
            raise ValueError("chunk must be positive.")
        self.generators = [path_generator(base_seed, i) for i in range(sl.start, sl.stop)]
        self.dim = dim
        self.chunk = chunk
        self._buffer: Optional[np.ndarray] = None
        self._position = chunk

    def __len__(self) -> int:
        return len(self.generators)

    def each(self, fn: Callable[[np.random.Generator], T]) -> List[T]:
        """Apply fn to every path stream in order; only valid before the first increment."""
        if self._buffer is not None:
            raise RuntimeError("per-path draws must come before the first increment.")
        return [fn(rng) for rng in self.generators]

    def step(self) -> np.ndarray:
        if self._position == self.chunk:
            self._buffer = np.stack([rng.standard_normal((self.chunk, self.dim)) for rng in self.generators], axis=1)
            self._position = 0
        out = self._buffer[self._position]
        self._position += 1
        return out


def map_blocks(fn: Callable[[int, slice], T], n_paths: int, block_size: int = BLOCK_SIZE) -> List[T]:
    """Run fn over every path block and return the results in block order."""
    blocks = block_slices(n_paths, block_size)
    workers = min(worker_count(), len(blocks))
    if workers <= 1:
        return [fn(index, sl) for index, sl in blocks]
    logger.debug("Dispatching %s blocks to %s workers.", len(blocks), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: fn(*item), blocks))
