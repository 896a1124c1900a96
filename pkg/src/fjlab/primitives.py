"""Renewal primitives: interarrival and service-time variates on isolated substreams.

Every primitive sequence (one per arrival type, per dedicated server and per
shared (server, type) pair) owns a counter-based Philox substream keyed by the
replication seed and a stable stream label.  Adding a server or switching the
scheduling policy therefore never perturbs the draws of any other sequence,
which is what makes paired (common random numbers) comparisons free.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("exponential", "erlang", "uniform", "deterministic", "hyperexponential")

_MASK64 = (1 << 64) - 1
_BLOCK = 256
_SCV_TOL = 1e-9


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(root: int, *parts: int | str) -> int:
    """Fold ``parts`` into ``root`` with splitmix64; strings hash via crc32."""
    h = splitmix64(int(root) & _MASK64)
    for p in parts:
        if isinstance(p, str):
            p = zlib.crc32(p.encode())
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h


@dataclass(frozen=True)
class DistributionSpec:
    """A positive distribution given by family, mean and squared coefficient of variation.

    ``scv`` may be omitted for families where it is implied (exponential,
    erlang, deterministic).  Erlang takes its phase count from ``k``.
    """

    family: str
    mean: float = 1.0
    scv: float | None = None
    k: int | None = None

    def __post_init__(self):
        fam = self.family
        if fam not in FAMILIES:
            raise ValueError(f"unknown distribution family {fam!r}; expected one of {FAMILIES}")
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise ValueError(f"mean must be positive and finite, got {self.mean}")
        implied = None
        if fam == "exponential":
            implied = 1.0
        elif fam == "deterministic":
            implied = 0.0
        elif fam == "erlang":
            k = self.k
            if k is None and self.scv is not None and self.scv > 0:
                k = round(1.0 / self.scv)
            if k is None or k < 1:
                raise ValueError("erlang needs a phase count k >= 1 (or scv = 1/k)")
            object.__setattr__(self, "k", int(k))
            implied = 1.0 / k
        if implied is not None:
            if self.scv is not None and abs(self.scv - implied) > _SCV_TOL:
                raise ValueError(f"{fam} requires scv = {implied:g}, got {self.scv:g}")
            object.__setattr__(self, "scv", implied)
            return
        if self.scv is None:
            raise ValueError(f"{fam} requires an explicit scv")
        if fam == "uniform" and not (0 < self.scv <= 1.0 / 3.0 + _SCV_TOL):
            raise ValueError(f"uniform requires scv in (0, 1/3], got {self.scv:g}")
        if fam == "hyperexponential" and not self.scv > 1:
            raise ValueError(f"hyperexponential requires scv > 1, got {self.scv:g}")

    def with_mean(self, mean: float) -> "DistributionSpec":
        return DistributionSpec(self.family, mean, self.scv, self.k)

    @property
    def variance(self) -> float:
        return self.scv * self.mean**2

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` variates.  Deterministic family consumes no randomness."""
        m = self.mean
        fam = self.family
        if fam == "deterministic":
            return np.full(n, m)
        if fam == "exponential":
            x = rng.exponential(m, n)
        elif fam == "erlang":
            x = rng.gamma(self.k, m / self.k, n)
        elif fam == "uniform":
            c = math.sqrt(3.0 * self.scv)
            x = rng.uniform(m * (1.0 - c), m * (1.0 + c), n)
        else:
            # balanced-means two-phase hyperexponential
            p1 = 0.5 * (1.0 + math.sqrt((self.scv - 1.0) / (self.scv + 1.0)))
            u = rng.random(n)
            e = rng.exponential(1.0, n)
            x = np.where(u < p1, e * m / (2.0 * p1), e * m / (2.0 * (1.0 - p1)))
        # variates must be strictly positive
        return np.maximum(x, np.finfo(float).tiny)


@dataclass(eq=False)
class RandomStream:
    """One independent substream, reproducible from ``(seed, stream_id)``.

    ``stream_id`` is a label such as ``("arrival", 0)`` or ``("shared", 1, 0)``.
    Variates are produced in fixed-size blocks so the sequence seen by the
    caller depends only on the seed, the label and the distribution.
    """

    seed: int
    stream_id: tuple
    _rng: np.random.Generator = field(init=False, repr=False)
    _buf: np.ndarray = field(init=False, repr=False)
    _pos: int = field(init=False, repr=False, default=0)
    _spec: DistributionSpec | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        key = [zlib.crc32(str(s).encode()) if isinstance(s, str) else int(s) for s in self.stream_id]
        ss = np.random.SeedSequence(int(self.seed) & _MASK64, spawn_key=tuple(key))
        self._rng = np.random.Generator(np.random.Philox(ss))
        self._buf = np.empty(0)

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def next(self, spec: DistributionSpec) -> float:
        if spec is not self._spec and spec != self._spec:
            self._spec = spec
            self._buf = np.empty(0)
            self._pos = 0
        if self._pos >= len(self._buf):
            self._buf = spec.draw(self._rng, _BLOCK)
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        return float(x)


def sample(spec: DistributionSpec, stream: RandomStream) -> float:
    return stream.next(spec)


def renewal_count(spec: DistributionSpec, stream: RandomStream, t: float) -> int:
    """Number of renewals in [0, t]: sup{n : U(n) <= t}."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    n = 0
    total = stream.next(spec)
    while total <= t:
        n += 1
        total += stream.next(spec)
    return n
