# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Poisson, discretized and thinned point processes on a periodic box.

All samplers are pure functions of their parameters and a `Seed`: every draw comes
from a counter-based substream keyed by (master seed, purpose tag, sample index), so
samples can be produced in any order, or concurrently, with identical results.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from scipy import stats

from errors import GeometryError, ParameterError, UnknownLabelError

logger = logging.getLogger(__name__)

Origin = Literal["poisson", "discretized", "thinned", "explicit"]

# relative slack used when checking that L/h is an integer
_INTEGRALITY_SLACK = 1e-9


def _as_readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def cells_per_side(length: float, step: float) -> int:
    """Return L/step, raising if it is not an integer."""
    ratio = length / step
    nearest = round(ratio)
    if nearest < 1 or abs(ratio - nearest) > _INTEGRALITY_SLACK * max(1.0, ratio):
        raise GeometryError(f"L/h must be an integer, got L={length!r}, h={step!r}")
    return int(nearest)


@dataclass(frozen=True)
class Box:
    """Periodic cube [0, L)^d standing in for the whole space."""

    d: int
    L: float
    periodic: bool = True

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise GeometryError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not self.L > 0:
            raise GeometryError(f"box side must be positive, got {self.L}")
        if not self.periodic:
            raise GeometryError("only periodic boxes are supported")

    @property
    def volume(self) -> float:
        return float(self.L) ** self.d

    def wrap(self, positions: np.ndarray) -> np.ndarray:
        """Map positions into [0, L)^d."""
        wrapped = np.mod(positions, self.L)
        # np.mod can round up to L itself for tiny negative inputs
        wrapped[wrapped >= self.L] = 0.0
        return wrapped

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Minimum-image displacement b - a."""
        delta = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        return delta - self.L * np.round(delta / self.L)

    def distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Periodic Euclidean distance."""
        return np.sqrt(np.sum(self.displacement(a, b) ** 2, axis=-1))


@dataclass(frozen=True)
class ProcessParams:
    """Intensity, discretization step and thinning parameter."""

    intensity: float = 0.0
    h: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        if self.intensity < 0:
            raise ParameterError(f"intensity must be non-negative, got {self.intensity}")
        if self.h < 0:
            raise ParameterError(f"discretization step must be non-negative, got {self.h}")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"thinning parameter must lie in [0, 1], got {self.p}")

    def bernoulli_parameter(self, d: int) -> float:
        """Retention probability λh^d of the discretized construction."""
        q = self.intensity * self.h**d
        if q > 1.0:
            raise ParameterError(
                f"lambda * h^d must be at most 1 for the discretized process, got {q}"
            )
        return q


@dataclass(frozen=True)
class Seed:
    """Master seed with counter-based substream derivation."""

    master: int

    def __post_init__(self):
        if not 0 <= int(self.master) < 2**64:
            raise ParameterError(f"master seed must be an unsigned 64-bit integer, got {self.master}")

    def key(self, tag: str, index: int) -> int:
        """128-bit Philox key for the (tag, index) substream."""
        digest = hashlib.sha256(f"{int(self.master)}:{tag}:{int(index)}".encode("utf-8")).digest()
        return int.from_bytes(digest[:16], "little")

    def generator(self, tag: str, index: int = 0) -> np.random.Generator:
        """Independent generator for (master, tag, index)."""
        return np.random.Generator(np.random.Philox(key=self.key(tag, index)))


@dataclass(frozen=True)
class PointCloud:
    """Labeled points in a periodic box; label i is row i of `positions`."""

    box: Box
    positions: np.ndarray
    origin: Origin = "explicit"
    params: ProcessParams = field(default_factory=ProcessParams)
    seed: int = 0
    parent_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, self.box.d)
        if positions.size and (positions.min() < 0 or positions.max() >= self.box.L):
            raise GeometryError("all positions must lie in [0, L)^d")
        object.__setattr__(self, "positions", _as_readonly(positions))
        if self.parent_labels is not None:
            parents = np.asarray(self.parent_labels, dtype=np.int64)
            object.__setattr__(self, "parent_labels", _as_readonly(parents))

    @classmethod
    def from_positions(cls, box: Box, positions) -> "PointCloud":
        """Cloud with explicitly placed points (wrapped into the box)."""
        array = np.asarray(positions, dtype=float).reshape(-1, box.d)
        return cls(box=box, positions=box.wrap(array), origin="explicit")

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def labels(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    def position(self, label: int) -> np.ndarray:
        if not 0 <= int(label) < len(self):
            raise UnknownLabelError(f"label {label} not in cloud of {len(self)} points")
        return self.positions[int(label)]

    def check_labels(self, labels) -> None:
        """Raise `UnknownLabelError` unless every label exists."""
        for label in labels:
            if not 0 <= int(label) < len(self):
                raise UnknownLabelError(f"label {label} not in cloud of {len(self)} points")


def sample_poisson(intensity: float, box: Box, seed: Seed, index: int = 0) -> PointCloud:
    """Poisson point process of the given intensity restricted to the box."""
    params = ProcessParams(intensity=intensity)
    rng = seed.generator("poisson", index)
    count = int(rng.poisson(params.intensity * box.volume))
    positions = box.wrap(rng.random((count, box.d)) * box.L)
    return PointCloud(box, positions, "poisson", params, int(seed.master))


def sample_discretized(
    h: float, intensity: float, box: Box, seed: Seed, index: int = 0
) -> PointCloud:
    """Discretized process: one candidate per h-cube, kept with probability λh^d.

    Cubes are enumerated in lexicographic order of their corner z, so the first
    retained cube gets label 0, and every cube holds at most one point.
    """
    if h <= 0:
        raise ParameterError(f"discretization step must be positive, got {h}")
    params = ProcessParams(intensity=intensity, h=h)
    q = params.bernoulli_parameter(box.d)
    m = cells_per_side(box.L, h)
    rng = seed.generator("discretized", index)

    kept = np.flatnonzero(rng.random(m**box.d) < q)
    corners = np.stack(np.unravel_index(kept, (m,) * box.d), axis=-1).astype(float)
    offsets = rng.random((kept.size, box.d))
    positions = box.wrap((corners + offsets) * h)
    return PointCloud(box, positions, "discretized", params, int(seed.master))


def thinning_mask(cloud: PointCloud, p: float, seed: Seed, index: int = 0) -> np.ndarray:
    """Boolean retention flags of an independent Bernoulli(p) deletion.

    The same (seed, index) gives monotone couplings across p: a point kept at p is
    kept at every p' > p.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"thinning parameter must lie in [0, 1], got {p}")
    rng = seed.generator("thin", index)
    return rng.random(len(cloud)) < p


def thin(cloud: PointCloud, p: float, seed: Seed, index: int = 0) -> PointCloud:
    """Bernoulli deletion of a cloud; survivors are relabeled contiguously."""
    keep = thinning_mask(cloud, p, seed, index)
    params = ProcessParams(intensity=cloud.params.intensity, h=cloud.params.h, p=p)
    return PointCloud(
        cloud.box,
        cloud.positions[keep],
        "thinned",
        params,
        int(seed.master),
        parent_labels=np.flatnonzero(keep),
    )


@dataclass(frozen=True)
class ProcessSpec:
    """Which process `count_statistics` draws from."""

    kind: Literal["poisson", "discretized", "thinned"]
    box: Box
    intensity: float
    h: float = 0.0
    p: float = 1.0

    def sample(self, seed: Seed, index: int) -> PointCloud:
        if self.kind == "poisson":
            return sample_poisson(self.intensity, self.box, seed, index)
        cloud = sample_discretized(self.h, self.intensity, self.box, seed, index)
        if self.kind == "thinned":
            return thin(cloud, self.p, seed, index)
        return cloud


@dataclass(frozen=True)
class CountStatistics:
    """Moments and histogram of point counts over independent realizations."""

    n_samples: int
    mean: float
    variance: float
    mean_stderr: float
    variance_stderr: float
    histogram: Tuple[int, ...]
    counts: np.ndarray = field(repr=False)


def count_statistics(spec: ProcessSpec, n_samples: int, seed: Seed) -> CountStatistics:
    """Mean, variance and histogram of the number of points."""
    if n_samples < 1:
        raise ParameterError(f"n_samples must be at least 1, got {n_samples}")
    counts = np.array([len(spec.sample(seed, i)) for i in range(n_samples)], dtype=np.int64)
    mean = float(counts.mean())
    variance = float(counts.var(ddof=1)) if n_samples > 1 else 0.0
    centered = counts - mean
    fourth = float(np.mean(centered**4))
    return CountStatistics(
        n_samples=n_samples,
        mean=mean,
        variance=variance,
        mean_stderr=float(np.sqrt(variance / n_samples)),
        variance_stderr=float(np.sqrt(max(fourth - variance**2, 0.0) / n_samples)),
        histogram=tuple(int(c) for c in np.bincount(counts)),
        counts=_as_readonly(counts),
    )


def poisson_goodness_of_fit(counts: np.ndarray, mean: float, min_expected: float = 5.0) -> float:
    """Chi-square p-value of observed counts against Poisson(mean).

    Bins are merged left to right until each holds at least `min_expected`
    expected observations; the upper tail is folded into the last bin.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.size
    top = int(max(counts.max(), stats.poisson.ppf(0.999, mean)))
    observed = np.bincount(counts, minlength=top + 1)[: top + 1].astype(float)
    observed[top] += np.sum(counts > top)
    expected = n * stats.poisson.pmf(np.arange(top + 1), mean)
    expected[top] += n * stats.poisson.sf(top, mean)

    merged_obs: List[float] = []
    merged_exp: List[float] = []
    acc_obs = acc_exp = 0.0
    for o, e in zip(observed, expected):
        acc_obs += o
        acc_exp += e
        if acc_exp >= min_expected:
            merged_obs.append(acc_obs)
            merged_exp.append(acc_exp)
            acc_obs = acc_exp = 0.0
    if merged_exp:
        merged_obs[-1] += acc_obs
        merged_exp[-1] += acc_exp
    if len(merged_exp) < 2:
        return 1.0
    result = stats.chisquare(np.array(merged_obs), np.array(merged_exp) * n / sum(merged_exp))
    return float(result.pvalue)


def format_cloud(cloud: PointCloud) -> str:
    """Plain-text form: header `d L h lambda p seed`, then `label x1 ... xd`."""
    params = cloud.params
    lines = [
        " ".join(
            [
                str(cloud.box.d),
                f"{cloud.box.L:.17g}",
                f"{params.h:.17g}",
                f"{params.intensity:.17g}",
                f"{params.p:.17g}",
                str(cloud.seed),
            ]
        )
    ]
    for label, x in enumerate(cloud.positions):
        lines.append(" ".join([str(label)] + [f"{c:.17g}" for c in x]))
    return "\n".join(lines) + "\n"


def parse_cloud(text: str, origin: Origin = "explicit") -> PointCloud:
    """Inverse of `format_cloud`."""
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows or len(rows[0]) != 6:
        raise GeometryError("cloud header must read `d L h lambda p seed`")
    d, length, h, intensity, p, seed = rows[0]
    box = Box(d=int(d), L=float(length))
    params = ProcessParams(intensity=float(intensity), h=float(h), p=float(p))
    body = rows[1:]
    labels = [int(r[0]) for r in body]
    if labels != list(range(len(body))):
        raise GeometryError("labels must be contiguous from 0 and sorted")
    positions = np.array([[float(c) for c in r[1:]] for r in body], dtype=float)
    return PointCloud(box, positions.reshape(-1, box.d), origin, params, int(seed))


def dump_cloud(cloud: PointCloud, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(format_cloud(cloud), encoding="utf-8")
    logger.debug("Wrote %d points to %s", len(cloud), path)
    return path


def load_cloud(path: Union[str, Path]) -> PointCloud:
    return parse_cloud(Path(path).read_text(encoding="utf-8"))
