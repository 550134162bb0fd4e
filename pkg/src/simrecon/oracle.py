"""Black-box similarity oracles, query accounting, and feedback degradation.

An oracle answers ``query(image, target) -> float`` and owns a ``QueryLedger``
that enforces a hard query budget. Oracles quantize incoming pixels and the
returned score to exact float32 values: that is the precision of the wire
protocol, so a local oracle and the same oracle behind a network server
produce identical scores for identical requests.
"""

from __future__ import annotations

import math
import threading
from abc import ABC, abstractmethod

import numpy as np

from .eigenspace import ImageTensor, horizontal_flip
from .rng import STREAM_EMBEDDER, STREAM_NOISE, RandomStream


class OracleError(Exception):
    """Base class for oracle failures.

    `partial_coords` / `partial_trace` are attached by the optimizer when a
    failure interrupts a run, so completed work is not discarded.
    """

    partial_coords = None
    partial_trace = None


class BudgetExhausted(OracleError):
    """The query budget does not admit another scored query."""


class UnknownTarget(OracleError):
    """The target id is not enrolled."""


class QueryLedger:
    """Monotone query counter with an optional hard budget.

    check-and-increment is atomic, so concurrent callers can never push
    `used` past `budget`.
    """

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 0:
            raise ValueError("budget must be nonnegative")
        self.budget = budget
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int | None:
        if self.budget is None:
            return None
        return self.budget - self._used

    def charge(self) -> int:
        """Consume one query; raises BudgetExhausted without incrementing."""
        with self._lock:
            if self.budget is not None and self._used >= self.budget:
                raise BudgetExhausted(
                    f"query budget of {self.budget} exhausted"
                )
            self._used += 1
            return self._used


class SimilarityOracle(ABC):
    """Interface the optimizer sees: a scalar score per (image, target) query."""

    ledger: QueryLedger

    @abstractmethod
    def query(self, image: ImageTensor, target: str) -> float:
        """Score `image` against `target`, consuming exactly one ledger unit."""


def quantize_pixels_f32(image: ImageTensor) -> ImageTensor:
    """Round pixels to exact float32 values (the wire-protocol granularity)."""
    q = np.asarray(image.pixels, dtype=np.float32).astype(np.float64)
    return ImageTensor(image.width, image.height, image.channels, q)


def _f32(x: float) -> float:
    return float(np.float32(x))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a.b / (|a| |b|); rejects zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float((a @ b) / (na * nb))


class SyntheticEmbedder:
    """Deterministic random linear embedding, a stand-in for a face encoder.

    The projection matrix has i.i.d. standard-normal entries drawn from the
    (seed, STREAM_EMBEDDER) counter stream in row-major order, rounded to
    float32 values; any conforming implementation reproduces it exactly.
    With `flip_concat`, the embedding of the mirrored image is appended.
    """

    def __init__(
        self,
        seed: int,
        embed_dim: int,
        width: int,
        height: int,
        channels: int = 3,
        flip_concat: bool = False,
    ):
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.seed = seed
        self.embed_dim = embed_dim
        self.width = width
        self.height = height
        self.channels = channels
        self.flip_concat = flip_concat
        d = width * height * channels
        flat = RandomStream(seed, STREAM_EMBEDDER).normals(embed_dim * d)
        self.projection = (
            np.asarray(flat, dtype=np.float32).astype(np.float64).reshape(embed_dim, d)
        )

    @property
    def dim(self) -> int:
        return self.width * self.height * self.channels

    def embed(self, image: ImageTensor) -> np.ndarray:
        """Project the image (and optionally its mirror) to embedding space."""
        if (image.width, image.height, image.channels) != (
            self.width,
            self.height,
            self.channels,
        ):
            raise ValueError(
                f"image {image.width}x{image.height}x{image.channels} does not "
                f"match embedder {self.width}x{self.height}x{self.channels}"
            )
        base = self.projection @ image.pixels
        if not self.flip_concat:
            return base
        mirrored = self.projection @ horizontal_flip(image).pixels
        return np.concatenate([base, mirrored])


class CosineOracle(SimilarityOracle):
    """Cosine similarity between the probe's embedding and an enrolled target's."""

    def __init__(
        self,
        embedder: SyntheticEmbedder,
        enrollment: dict[str, ImageTensor],
        budget: int | None = None,
    ):
        if not enrollment:
            raise ValueError("enrollment must not be empty")
        self.embedder = embedder
        self._enrolled = {
            tid: embedder.embed(quantize_pixels_f32(img))
            for tid, img in enrollment.items()
        }
        self.ledger = QueryLedger(budget)

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(self._enrolled)

    def query(self, image: ImageTensor, target: str) -> float:
        if target not in self._enrolled:
            raise UnknownTarget(f"target {target!r} is not enrolled")
        probe = self.embedder.embed(quantize_pixels_f32(image))
        self.ledger.charge()
        score = cosine(probe, self._enrolled[target])
        return _f32(min(1.0, max(-1.0, score)))


def make_cosine_oracle(
    embedder: SyntheticEmbedder,
    enrollment: dict[str, ImageTensor],
    budget: int | None = None,
) -> CosineOracle:
    """Cosine oracle over `enrollment` with a fresh ledger."""
    return CosineOracle(embedder, enrollment, budget)


class _Wrapper(SimilarityOracle):
    def __init__(self, inner: SimilarityOracle):
        self.inner = inner

    @property
    def ledger(self) -> QueryLedger:
        return self.inner.ledger

    @property
    def targets(self):
        return getattr(self.inner, "targets", ())


class QuantizeWrapper(_Wrapper):
    """Round scores to the nearest multiple of 2/2**bits, ties away from zero."""

    def __init__(self, inner: SimilarityOracle, bits: int):
        if bits < 1:
            raise ValueError("bits must be >= 1")
        super().__init__(inner)
        self.step = 2.0 / (2**bits)

    def query(self, image: ImageTensor, target: str) -> float:
        score = self.inner.query(image, target)
        ratio = score / self.step
        n = math.copysign(math.floor(abs(ratio) + 0.5), ratio)
        return _f32(min(1.0, max(-1.0, n * self.step)))


class NoiseWrapper(_Wrapper):
    """Add seeded Gaussian noise to scores, then clamp to [-1, 1]."""

    def __init__(self, inner: SimilarityOracle, stddev: float, seed: int):
        if stddev < 0:
            raise ValueError("stddev must be >= 0")
        super().__init__(inner)
        self.stddev = stddev
        self._stream = RandomStream(seed, STREAM_NOISE)
        self._lock = threading.Lock()

    def query(self, image: ImageTensor, target: str) -> float:
        score = self.inner.query(image, target)
        with self._lock:
            noise = self.stddev * self._stream.normals(1)[0]
        return _f32(min(1.0, max(-1.0, score + noise)))


def wrap_quantize(oracle: SimilarityOracle, bits: int) -> SimilarityOracle:
    return QuantizeWrapper(oracle, bits)


def wrap_noise(oracle: SimilarityOracle, stddev: float, seed: int) -> SimilarityOracle:
    return NoiseWrapper(oracle, stddev, seed)
