"""Product Bernoulli and discrete Gaussian measures on configurations.

The discrete Gaussian measure with kernel g is

    nu_g(eta) = nu_bar(eta) exp(2 Pi(g)(eta)) / Z_g,

with nu_bar the product Bernoulli measure with the steady profile and
Pi(g) = (1/4N) sum_{i != j} etabar_i etabar_j g_ij.  Exact weights are
available for N <= 7; larger lattices are sampled by single-site Metropolis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numba
import numpy as np

from .dynamics import MAX_EXACT_N, MeasureVector, SizeError, lattice_kernel, pi_all
from .io import write_csv
from .lattice import Params, Profile, all_configurations
from .rng import UniformBuffer, as_generator

N_BATCHES = 32
BURN_SWEEPS = 20
THIN_SWEEPS = 2


def sample_product(profile, rng, size=None) -> np.ndarray:
    """Independent Bernoulli(rho_i) occupations.

    ``profile`` is a Profile or an array of site densities.
    """
    rng = as_generator(rng)
    rho = profile.rho_bar if isinstance(profile, Profile) else np.asarray(profile, dtype=float)
    shape = rho.shape if size is None else (size,) + rho.shape
    return (rng.random(shape) < rho).astype(np.int8)


@dataclass
class GaussianMeasureSpec:
    """Kernel g (callable, lattice array or None) with the profile it tilts."""

    g: object
    profile: Profile
    log_partition: float | None = None
    glat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.glat = lattice_kernel(self.g, self.profile.params)

    @property
    def params(self) -> Params:
        return self.profile.params

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.glat))) if self.glat.size else 0.0

    def is_negative(self, tol=1e-12) -> bool:
        """Largest eigenvalue of the lattice matrix (with its diagonal) is <= tol."""
        if callable(self.g):
            x = self.params.positions
            X, Y = np.meshgrid(x, x, indexing="ij")
            full = np.asarray(self.g(X, Y), dtype=float)
        else:
            full = np.zeros_like(self.glat) if self.g is None else np.asarray(self.g, dtype=float)
        return float(np.linalg.eigvalsh(0.5 * (full + full.T))[-1]) <= tol


def product_weights(profile: Profile) -> np.ndarray:
    conf = all_configurations(profile.params.n_sites)
    rho = profile.rho_bar
    return np.prod(np.where(conf == 1, rho, 1 - rho), axis=1)


def exact_gaussian_measure(spec: GaussianMeasureSpec) -> MeasureVector:
    """Normalised weights over all 2^(2N-1) configurations; fills ``log_partition``."""
    p = spec.params
    if p.N > MAX_EXACT_N:
        raise SizeError(f"exact enumeration needs N <= {MAX_EXACT_N}, got N = {p.N}")
    base = product_weights(spec.profile)
    expo = 2.0 * pi_all(p, spec.glat, spec.profile)
    shift = expo.max()
    w = base * np.exp(expo - shift)
    Z = w.sum()
    spec.log_partition = float(np.log(Z) + shift)
    return MeasureVector(w / Z, p)


# ---------------------------------------------------------------------------
# Metropolis sampler


@numba.njit(cache=True)
def _flip_log_ratio(a, eta, V, logodds, N):
    # log of pi(eta^a)/pi(eta): tilt 2 dPi plus the Bernoulli odds
    s = 1.0 - 2.0 * eta[a]
    return s * V[a] / N + s * logodds[a]


@numba.njit(cache=True)
def _metropolis(eta, etabar, V, g, logodds, N, n_steps, uniforms, upos):
    n = eta.size
    for _ in range(n_steps):
        a = int(uniforms[upos] * n)
        if a >= n:
            a = n - 1
        lr = _flip_log_ratio(a, eta, V, logodds, N)
        if lr >= 0.0 or uniforms[upos + 1] < np.exp(lr):
            d = 1 - 2 * eta[a]
            eta[a] += d
            etabar[a] += d
            for j in range(n):
                V[j] += d * g[a, j]
        upos += 2
    return upos


class GlauberChain:
    """Random-scan single-site Metropolis chain targeting nu_g."""

    def __init__(self, spec: GaussianMeasureSpec, rng, initial=None, block=1 << 18):
        self.spec = spec
        self.rng = as_generator(rng)
        p = spec.params
        self.N = p.N
        self.n = p.n_sites
        rho = spec.profile.rho_bar
        self.logodds = np.log(rho / (1 - rho))
        self.eta = (sample_product(spec.profile, self.rng).astype(np.int64)
                    if initial is None else np.array(initial, dtype=np.int64))
        self.etabar = self.eta - rho
        self.V = spec.glat @ self.etabar
        self._buf = UniformBuffer(self.rng, block)
        self._u = self._buf.next_block()
        self._upos = 0

    def run(self, steps: int):
        left = int(steps)
        while left > 0:
            avail = (self._u.size - self._upos) // 2
            if avail == 0:
                self._u = self._buf.next_block()
                self._upos = 0
                continue
            k = min(avail, left)
            self._upos = _metropolis(self.eta, self.etabar, self.V, self.spec.glat, self.logodds,
                                     self.N, k, self._u, self._upos)
            left -= k
        return self.eta

    def sweeps(self, count: int):
        return self.run(count * self.n)

    def samples(self, n_samples: int, burn_sweeps=BURN_SWEEPS, thin_sweeps=THIN_SWEEPS) -> np.ndarray:
        self.sweeps(burn_sweeps)
        out = np.empty((n_samples, self.n), dtype=np.int8)
        for s in range(n_samples):
            self.sweeps(thin_sweeps)
            out[s] = self.eta
        return out


def glauber_sampler(spec: GaussianMeasureSpec, sweeps: int, rng, initial=None) -> np.ndarray:
    """Configuration after ``sweeps`` sweeps of the Metropolis chain."""
    if sweeps < 1:
        raise ValueError("at least one sweep is required")
    return GlauberChain(spec, rng, initial).sweeps(sweeps).copy()


def glauber_samples(spec: GaussianMeasureSpec, n_samples: int, rng, burn_sweeps=BURN_SWEEPS,
                    thin_sweeps=THIN_SWEEPS) -> np.ndarray:
    return GlauberChain(spec, rng).samples(n_samples, burn_sweeps, thin_sweeps)


def transition_probability(spec: GaussianMeasureSpec, eta, a: int) -> float:
    """P(eta -> eta^a) for one step of the random-scan chain."""
    p = spec.params
    rho = spec.profile.rho_bar
    eta = np.asarray(eta, dtype=np.int64)
    V = spec.glat @ (eta - rho)
    lr = _flip_log_ratio(a, eta, V, np.log(rho / (1 - rho)), p.N)
    return min(1.0, float(np.exp(lr))) / p.n_sites


# ---------------------------------------------------------------------------
# correlations


def batch_means(values, n_batches=N_BATCHES):
    """Mean and batch-means standard error of a (correlated) sample series."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 * n_batches:
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else np.nan
    m = v.size // n_batches
    b = v[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(v.mean()), float(b.std(ddof=1) / np.sqrt(n_batches))


def npoint_correlation(source, sites, profile: Profile | None = None, n_batches=N_BATCHES):
    """E[prod_{i in sites} etabar_i] and its standard error.

    ``source`` is an exact MeasureVector (standard error 0) or an array of
    sampled configurations (batch-means standard error); ``sites`` are
    lattice labels in {-N+1, ..., N-1}.
    """
    sites = list(sites)
    if len(sites) == 0:
        raise ValueError("at least one site is required")
    if len(set(sites)) != len(sites):
        raise ValueError(f"sites must be distinct, got {sites}")
    if isinstance(source, MeasureVector):
        p = source.params
        if profile is None:
            from .lattice import steady_profile
            profile = steady_profile(p)
        offs = [p.offset(i) for i in sites]
        conf = all_configurations(p.n_sites)[:, offs]
        vals = np.prod(conf - profile.rho_bar[offs], axis=1)
        return float(source.probs @ vals), 0.0
    if profile is None:
        raise ValueError("a profile is required for sampled configurations")
    p = profile.params
    offs = [p.offset(i) for i in sites]
    vals = np.prod(np.asarray(source, dtype=float)[:, offs] - profile.rho_bar[offs], axis=1)
    return batch_means(vals, n_batches)


def correlation_table(source, n: int, profile: Profile, method: str):
    """All distinct n-subsets of sites with their correlation (rows for CSV)."""
    p = profile.params
    rows = []
    for sub in itertools.combinations(p.sites.tolist(), n):
        v, se = npoint_correlation(source, sub, profile)
        rows.append((n, *sub, v, se, method))
    return rows


def write_correlation_csv(path, rows, n: int):
    cols = ["n"] + [f"site{k}" for k in range(n)] + ["value", "stderr", "method"]
    return write_csv(path, cols, rows, f"{n}-point centred correlation E[prod etabar]")


def rms_correlation(source, n: int, profile: Profile) -> float:
    """Root mean square of the n-point function over all distinct n-subsets."""
    vals = [npoint_correlation(source, sub, profile)[0]
            for sub in itertools.combinations(profile.params.sites.tolist(), n)]
    return float(np.sqrt(np.mean(np.square(vals))))


# ---------------------------------------------------------------------------
# concentration


@dataclass
class CorrelationTensorSpec:
    """Tensor A over Lambda_N^d with offset set J (containing 0)."""

    A: np.ndarray
    J: tuple = (0,)
    params: Params | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.J = tuple(sorted(set(int(j) for j in self.J)))
        if 0 not in self.J:
            raise ValueError("offset set J must contain 0")

    @property
    def d(self) -> int:
        return self.A.ndim

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.A))) if self.A.size else 0.0

    @property
    def hs_norm(self) -> float:
        return float(np.sqrt(np.sum(self.A ** 2)))

    @property
    def norm_2N(self) -> float:
        N = self.params.N
        return float(np.sqrt(np.sum(self.A ** 2) / N ** self.d))

    def satisfies_no_repeat(self) -> bool:
        """A vanishes whenever a site would appear twice in the product."""
        for idx in zip(*np.nonzero(self.A)):
            block = [int(idx[0]) + j for j in self.J] + [int(k) for k in idx[1:]]
            if len(set(block)) < len(block):
                return False
        return True

    def evaluate(self, configs, profile: Profile) -> np.ndarray:
        """X^A_{d,J} for each row of ``configs``."""
        E = np.atleast_2d(np.asarray(configs, dtype=float)) - profile.rho_bar
        n = E.shape[1]
        head = np.ones_like(E)
        valid = np.ones(n, dtype=bool)
        for j in self.J:
            shifted = np.zeros_like(E)
            lo, hi = max(0, -j), min(n, n - j)
            shifted[:, lo:hi] = E[:, lo + j:hi + j]
            head *= shifted
            idx = np.arange(n) + j
            valid &= (idx >= 0) & (idx < n)
        head *= valid
        T = np.broadcast_to(self.A, (E.shape[0],) + self.A.shape)
        for _ in range(self.d - 1):
            T = np.einsum("s...k,sk->s...", T, E)
        return np.einsum("si,si->s", T, head)


def concentration_check(spec: CorrelationTensorSpec, c: float, samples: int, rng,
                        profile: Profile | None = None, chunk: int = 4096):
    """MC estimate of E[exp(c |X|^{2/d} / |A|_HS^{2/d})] under the product measure.

    Returns (estimate, standard error).
    """
    from .lattice import steady_profile
    profile = steady_profile(spec.params) if profile is None else profile
    if spec.hs_norm == 0:
        return 1.0, 0.0
    rng = as_generator(rng)
    d = spec.d
    scale = spec.hs_norm ** (2.0 / d)
    vals = []
    left = samples
    while left > 0:
        m = min(chunk, left)
        X = spec.evaluate(sample_product(profile, rng, m), profile)
        vals.append(np.exp(c * np.abs(X) ** (2.0 / d) / scale))
        left -= m
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def calibrate_concentration(spec: CorrelationTensorSpec, target: float, samples: int, seed: int,
                            profile: Profile | None = None, c_max=20.0, iters=40) -> float:
    """Largest c with statistic <= target, by bisection on common random numbers."""
    lo, hi = 0.0, c_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val, _ = concentration_check(spec, mid, samples, seed, profile)
        if val <= target:
            lo = mid
        else:
            hi = mid
    return lo


def offdiagonal_ones(params: Params) -> CorrelationTensorSpec:
    n = params.n_sites
    return CorrelationTensorSpec(np.ones((n, n)) - np.eye(n), (0,), params)
