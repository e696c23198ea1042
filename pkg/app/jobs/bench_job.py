import asyncio
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import BenchConfig
from app.core.sop import newton_schulz, post_compensate, pre_normalize
from app.core.tensor import Tensor
from app.errors import ConfigError
from app.models import PreNorm
from app.oracle.linalg import matrix_sqrt_exact, random_spd, relative_frobenius_error
from app.utils import write_csv

BENCH_COLUMNS = ["d", "iterations", "ns_ms", "exact_ms", "rel_err"]


class BenchJob:
    """
    Times the Newton-Schulz square root (pre-normalize, N coupled steps, compensate) against the
    Jacobi-based exact square root on the same random SPD matrices, and reports the worst
    relative Frobenius error of the approximation per (d, N).
    """

    def __init__(
        self,
        dims: Sequence[int] = tuple(BenchConfig.DIMENSIONS),
        iterations: Sequence[int] = tuple(BenchConfig.ITERATIONS),
        repeats: int = BenchConfig.REPEATS,
        seed: int = BenchConfig.SEED,
        pre_norm: PreNorm = PreNorm.TRACE,
    ):
        self.logger = logging.getLogger("BenchJob")
        if not dims:
            raise ConfigError("bench needs at least one dimension")
        if not iterations:
            raise ConfigError("bench needs at least one iteration count")
        if min(dims) < 2 or min(iterations) < 1 or repeats < 1:
            raise ConfigError(f"invalid bench grid: dims {list(dims)}, iterations {list(iterations)}, repeats {repeats}")
        self.config = BenchConfig()
        self.dims = list(dims)
        self.iterations = list(iterations)
        self.repeats = repeats
        self.seed = seed
        self.pre_norm = pre_norm

    def _newton_schulz_root(self, sigma: np.ndarray, iterations: int) -> np.ndarray:
        A, divisor = pre_normalize(Tensor(sigma), self.pre_norm)
        return post_compensate(newton_schulz(A, iterations), divisor).data

    def measure(self) -> List[Dict[str, float]]:
        rows = []
        for dim in self.dims:
            rng = np.random.default_rng([self.seed, dim])
            matrices = [random_spd(dim, rng) for _ in range(self.repeats)]

            started = time.perf_counter()
            exact = [matrix_sqrt_exact(matrix) for matrix in matrices]
            exact_ms = (time.perf_counter() - started) * 1000.0 / self.repeats

            for iterations in self.iterations:
                started = time.perf_counter()
                approx = [self._newton_schulz_root(matrix, iterations) for matrix in matrices]
                ns_ms = (time.perf_counter() - started) * 1000.0 / self.repeats
                rel_err = max(relative_frobenius_error(z, root) for z, root in zip(approx, exact))
                rows.append(
                    {"d": dim, "iterations": iterations, "ns_ms": ns_ms, "exact_ms": exact_ms, "rel_err": rel_err}
                )
                self.logger.info(
                    f"d={dim} N={iterations}: newton-schulz {ns_ms:.3f} ms, exact {exact_ms:.3f} ms, "
                    f"rel err {rel_err:.2e}"
                )
        return rows

    async def run(self, output: Optional[Path] = None) -> List[Dict[str, float]]:
        rows = await asyncio.to_thread(self.measure)
        if output is not None:
            write_csv(rows, BENCH_COLUMNS, Path(output))
        return rows
