import datetime
import logging
import time
import typing
import zlib

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]


class FunctionalEstimate(typing.NamedTuple):
    estimate: float
    standard_error: float


def substream(seed: int, *keys: int) -> np.random.Generator:
    """
    Counter-based Philox stream for the coordinate (seed, *keys).

    Distinct key tuples give statistically independent streams, so replications can be scheduled on any number of
    threads in any order and still reproduce bit-for-bit.
    """
    if seed < 0 or any(key < 0 for key in keys):
        raise ValueError(f"Seeds and stream keys must be non-negative: seed={seed}, keys={keys}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=keys)))


def stable_key(label: str) -> int:
    return zlib.crc32(label.encode('utf-8'))


def standard_normal_columns(
        seed: int,
        stream: typing.Sequence[int],
        n: int,
        k: int,
        moment_matching: bool = False,
) -> FloatArray:
    """
    n x k matrix of standard normals, column j drawn from substream (seed, *stream, j).

    With moment_matching the columns are centred and whitened so their sample covariance (ddof=1) is exactly the
    identity.
    """
    draws = np.empty((n, k), dtype=np.float64)
    for j in range(k):
        draws[:, j] = substream(seed, *stream, j).standard_normal(n)
    if not moment_matching:
        return draws
    if n <= k:
        raise ValueError(f"Moment matching needs more draws than columns: n={n}, k={k}")
    centred = draws - draws.mean(axis=0)
    chol = np.linalg.cholesky(centred.T @ centred / (n - 1))
    whitened: FloatArray = np.linalg.solve(chol, centred.T).T
    return whitened


def batch_variance(values: FloatArray, batches: int = 50) -> FunctionalEstimate:
    """Sample variance with a batch-means standard error."""
    if len(values) < 2 * batches:
        batches = max(2, len(values) // 2)
    batch_vars = np.array([np.var(chunk, ddof=1) for chunk in np.array_split(values, batches)])
    return FunctionalEstimate(
        estimate=float(np.var(values, ddof=1)),
        standard_error=float(np.std(batch_vars, ddof=1) / np.sqrt(batches)),
    )


class CodeBlockTimer:
    def __init__(self, description: typing.Optional[str] = None, logger: typing.Optional[logging.Logger] = None) -> None:
        self._description = description
        self._logger = logger
        self.__begin_time: typing.Optional[float] = None
        self.__end_time: typing.Optional[float] = None

    def __enter__(self) -> 'CodeBlockTimer':
        self.__begin_time = time.perf_counter()
        self.__end_time = None
        return self

    def __exit__(self, exc_type: typing.Any, exc_val: typing.Any, exc_tb: typing.Any) -> None:
        self.__end_time = time.perf_counter()
        if self._logger is not None and self._description is not None and exc_type is None:
            self._logger.info("%s took %s", self._description, self.timedelta)

    @property
    def timedelta(self) -> datetime.timedelta:
        if self.__begin_time is None or self.__end_time is None:
            raise ValueError("Must be called after the context manager exits")
        return datetime.timedelta(seconds=self.__end_time - self.__begin_time)
