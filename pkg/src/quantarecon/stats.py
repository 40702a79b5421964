"""Photon statistics of 1-bit detectors.

A pixel receiving Poisson(lambda) photons during one exposure can only
report whether at least one arrived, so each binary voxel is
Bernoulli(1 - exp(-lambda)). Splitting detections between two volumes is
p-thinning of that point process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import BitVolume, DenseVolume, RandomSource, Shape3, VolumeError


@dataclass(frozen=True)
class TruncatedPoisson:
    """Detection statistics for one voxel at Poisson rate ``lam``."""

    lam: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"rate must be non-negative, got {self.lam}")

    @property
    def p0(self) -> float:
        return math.exp(-self.lam)

    @property
    def p1(self) -> float:
        return -math.expm1(-self.lam)


def activation_prob(lam):
    """Probability that a voxel at Poisson rate ``lam`` fires: ``1 - exp(-lam)``.

    Accepts scalars or arrays; computed in float64.
    """
    arr = np.asarray(lam, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("rate must be non-negative")
    out = -np.expm1(-arr)
    return float(out) if out.ndim == 0 else out


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"thinning probability must lie in [0, 1], got {p}")
    return p


def thin_array(raw: np.ndarray, p: float, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Array-level p-thinning; ``raw`` is a 0/1 array of any shape.

    One uniform draw is consumed per detection, in flattened order.
    """
    p = _check_p(p)
    flat = raw.reshape(-1).astype(bool)
    idx = np.flatnonzero(flat)
    keep = gen.random(idx.size) < p
    inp = np.zeros(flat.size, np.uint8)
    inp[idx[keep]] = 1
    tar = flat.astype(np.uint8) - inp
    return inp.reshape(raw.shape), tar.reshape(raw.shape)


def thin(v: BitVolume, p: float, rng: RandomSource) -> tuple[BitVolume, BitVolume]:
    """Route each detection to ``input`` with probability ``p``, else ``target``.

    The two outputs partition ``v``: their AND is empty and their OR is ``v``.
    """
    inp, tar = thin_array(v.to_array(), p, rng.generator())
    return BitVolume.from_array(inp), BitVolume.from_array(tar)


def superpose(vs) -> DenseVolume:
    """Voxel-wise detection count over volumes of equal shape."""
    vs = list(vs)
    if not vs:
        raise VolumeError("superpose needs at least one volume")
    shape = vs[0].shape
    acc = np.zeros(shape.as_tuple(), np.int64)
    for v in vs:
        if v.shape != shape:
            raise VolumeError(f"shape mismatch: {v.shape.as_tuple()} vs {shape.as_tuple()}")
        acc += v.to_array()
    return DenseVolume(shape, acc.astype(np.float32))


def bin_temporal(v: BitVolume, n: int) -> DenseVolume:
    """Sum ``n`` consecutive frames; a trailing partial window is dropped.

    Counts in each window are Binomial(n, 1 - exp(-lambda)), not Poisson.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"window must be an integer >= 1, got {n}")
    n = int(n)
    t_out = v.shape.t // n
    if t_out == 0:
        raise VolumeError(f"window {n} longer than volume ({v.shape.t} frames)")
    arr = v.to_array()[: t_out * n].astype(np.int64)
    out = arr.reshape(t_out, n, v.shape.h, v.shape.w).sum(axis=1)
    return DenseVolume(Shape3(t_out, v.shape.h, v.shape.w), out.astype(np.float32))


def binomial_ci(n: int, prob: float, z: float = 3.0) -> tuple[float, float]:
    """Interval ``n*prob +- z*sqrt(n*prob*(1-prob))`` for a binomial count."""
    mu = n * prob
    sd = math.sqrt(n * prob * (1.0 - prob))
    return mu - z * sd, mu + z * sd


# ---------------------------------------------------------------------------
# Statistical checks, shared by the test-suite and the ``stats-check`` command.


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_partition(rng: RandomSource, volumes: int = 10_000, shape=(4, 5, 6)) -> CheckResult:
    """Thin many random volumes and verify AND = 0, OR = raw, input rate at p."""
    gen = rng.generator()
    bad = 0
    for k in range(volumes):
        raw = (gen.random(shape) < gen.random()).astype(np.uint8)
        p = gen.random()
        inp, tar = thin_array(raw, p, gen)
        if np.any(inp & tar) or np.any((inp | tar) != raw):
            bad += 1
    return CheckResult("thinning partition", bad == 0, f"{volumes} volumes, {bad} violations")


def check_activation_rate(lam: float, draws: int, rng: RandomSource) -> CheckResult:
    """Bernoulli(1 - e^-lam) sampling: empirical count within 3 sigma."""
    prob = activation_prob(lam)
    count = int((rng.generator().random(draws) < prob).sum())
    lo, hi = binomial_ci(draws, prob)
    return CheckResult(
        f"activation rate lambda={lam}",
        lo <= count <= hi,
        f"{count}/{draws} = {count / draws:.6f}, expected {prob:.6f}",
    )


def check_poisson_clip_equivalence(lam: float, draws: int, rng: RandomSource,
                                   alpha: float = 0.01) -> CheckResult:
    """Poisson(lam) clipped at 1 is not distinguishable from Bernoulli(1 - e^-lam).

    A two-sided exact binomial test on the clipped Poisson draws against the
    closed-form activation probability.
    """
    clipped = np.minimum(rng.generator().poisson(lam, size=draws), 1)
    k = int(clipped.sum())
    pval = sps.binomtest(k, draws, activation_prob(lam)).pvalue
    return CheckResult(
        f"poisson-clip equivalence lambda={lam}",
        pval >= alpha,
        f"{k}/{draws} ones, p-value {pval:.4f} (alpha {alpha})",
    )


def check_split_anticorrelation(rng: RandomSource, n: int = 100_000) -> CheckResult:
    """Over detected voxels input and target are perfectly anti-correlated."""
    gen = rng.generator()
    inp, tar = thin_array(np.ones(n, np.uint8), 0.5, gen)
    r = float(np.corrcoef(inp, tar)[0, 1])
    return CheckResult("split anti-correlation", r == -1.0, f"corr = {r}")


def run_battery(seed: int = 0, draws: int = 1_000_000) -> list[CheckResult]:
    root = RandomSource(seed)
    results = [check_partition(root.child(0))]
    for i, lam in enumerate((0.01, 0.0625, 0.5)):
        results.append(check_activation_rate(lam, draws, root.child(1, i)))
        results.append(check_poisson_clip_equivalence(lam, draws, root.child(2, i)))
    results.append(check_split_anticorrelation(root.child(3)))
    return results
