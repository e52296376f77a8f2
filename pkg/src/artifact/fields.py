"""Observables of a configuration and time-averaged correlation kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import write_csv
from .lattice import Params, Profile, steady_profile


@dataclass
class TestFunctionGrid:
    """Values phi_ij = phi(i/N, j/N) on the lattice."""

    values: np.ndarray
    symmetric: bool = False

    @classmethod
    def from_callable(cls, fn, params: Params, symmetric=False):
        x = params.positions
        X, Y = np.meshgrid(x, x, indexing="ij")
        return cls(np.asarray(fn(X, Y), dtype=float) * np.ones_like(X), symmetric)

    def symmetrized(self):
        return TestFunctionGrid(0.5 * (self.values + self.values.T), True)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.symmetric and not np.allclose(self.values, self.values.T, rtol=0, atol=1e-14):
            raise ValueError("test function flagged symmetric is not symmetric")


def _grid_values(phi, params: Params) -> np.ndarray:
    if isinstance(phi, TestFunctionGrid):
        return phi.values
    if callable(phi):
        return TestFunctionGrid.from_callable(phi, params).values
    return np.asarray(phi, dtype=float)


def _etabar(config, profile):
    return np.asarray(config, dtype=float) - profile.rho_bar


def pi_field(config, phi, profile: Profile) -> float:
    """(1/4N) sum_{i != j} etabar_i etabar_j phi_ij."""
    p = profile.params
    vals = _grid_values(phi, p)
    eb = _etabar(config, profile)
    full = eb @ vals @ eb
    return float(full - np.sum(eb * eb * np.diagonal(vals))) / (4 * p.N)


def y_field(config, psi, profile: Profile) -> float:
    """N^{-1/2} sum_i etabar_i psi(i/N)."""
    p = profile.params
    vals = psi(p.positions) if callable(psi) else np.asarray(psi, dtype=float)
    vals = np.broadcast_to(vals, (p.n_sites,))
    return float(_etabar(config, profile) @ vals) / np.sqrt(p.N)


def lattice_jump(h, params: Params) -> np.ndarray:
    """N (h_{i+1,i} + h_{i-1,i} - 2 h_{ii}) for every site, from a callable h."""
    N = params.N
    x = params.positions
    return N * (h(x + 1.0 / N, x) + h(x - 1.0 / N, x) - 2 * h(x, x))


def neumann_term(config, jump, profile: Profile) -> float:
    """(1/4) sum over bonds (i, i+1) of etabar_i etabar_{i+1} jump_h(i/N).

    ``jump`` is the diagonal jump d1 h(x+, x) - d1 h(x-, x): a scalar, a
    callable of x, an array over the 2N-1 sites or over the 2N-2 bonds, or any
    object exposing ``jump_nodes`` and ``grid``.
    """
    p = profile.params
    n = p.n_sites
    x = p.positions[:-1]
    if hasattr(jump, "jump_nodes"):
        j = np.interp(x, jump.grid.x, jump.jump_nodes)
    elif callable(jump):
        j = np.asarray(jump(x), dtype=float) * np.ones(n - 1)
    else:
        j = np.asarray(jump, dtype=float)
        if j.ndim == 0:
            j = np.full(n - 1, float(j))
        elif j.size == n:
            j = j[:-1]
        elif j.size != n - 1:
            raise ValueError(f"jump data must have {n - 1} or {n} entries")
    eb = _etabar(config, profile)
    return float(0.25 * np.sum(eb[:-1] * eb[1:] * j))


class KernelEstimate:
    """Time integrals S_ij of etabar_i etabar_j over the tracked sites.

    ``k_hat = N S / T`` estimates the correlation kernel at (i/N, j/N).
    Batch integrals, when present, give batch-means standard errors.
    """

    def __init__(self, profile: Profile, tracked=None, stride: int | None = None):
        p = profile.params
        self.profile = profile
        self.params = p
        if tracked is None:
            stride = 1 if stride is None else int(stride)
            tracked = np.arange(0, p.n_sites, stride)
        self.tracked = np.asarray(tracked, dtype=np.int64)
        self.stride = int(self.tracked[1] - self.tracked[0]) if self.tracked.size > 1 else 1
        nt = self.tracked.size
        self.S = np.zeros((nt, nt))
        self.T = 0.0
        self.batches = []  # list of (S_batch, T_batch)

    # -- accumulation -------------------------------------------------------
    def accumulate_pairs(self, config, dt: float):
        if not dt > 0:
            raise ValueError("holding time must be positive")
        eb = _etabar(config, self.profile)[self.tracked]
        self.S += np.outer(eb, eb) * dt
        self.T += dt

    def merge(self, other: "KernelEstimate") -> "KernelEstimate":
        if not np.array_equal(self.tracked, other.tracked):
            raise ValueError("cannot merge estimates over different pair sets")
        out = KernelEstimate(self.profile, self.tracked)
        out.S = self.S + other.S
        out.T = self.T + other.T
        out.batches = self.batches + other.batches
        return out

    @classmethod
    def from_trajectory(cls, traj, start=None, end=None, n_batches=None):
        """Estimate from a simulation between two stop times (default: after burn-in).

        Stops strictly inside the window delimit the batches.
        """
        profile = steady_profile(traj.params)
        stops = traj.stops
        t0 = traj.burn_in if start is None else float(start)
        t1 = stops[-1] if end is None else float(end)
        idx = [i for i, s in enumerate(stops) if t0 - 1e-12 <= s <= t1 + 1e-12]
        if t0 == 0.0:
            idx = [-1] + idx
        if len(idx) < 2:
            raise ValueError("window contains no complete interval")
        est = cls(profile, traj.tracked)
        rho = profile.rho_bar[traj.tracked]

        def centred(i0, i1):
            tau0 = np.zeros(traj.params.n_sites) if i0 < 0 else traj.tau[i0]
            pair0 = np.zeros_like(traj.pair[0]) if i0 < 0 else traj.pair[i0]
            s0 = 0.0 if i0 < 0 else stops[i0]
            dT = stops[i1] - s0
            P = traj.pair[i1] - pair0
            P = 0.5 * (P + P.T)
            tau = (traj.tau[i1] - tau0)[traj.tracked]
            S = P - np.outer(tau, rho) - np.outer(rho, tau) + dT * np.outer(rho, rho)
            return S, dT

        for a, b in zip(idx[:-1], idx[1:]):
            S, dT = centred(a, b)
            est.batches.append((S, dT))
            est.S += S
            est.T += dT
        if n_batches is not None and len(est.batches) != n_batches:
            raise ValueError(f"expected {n_batches} batches, found {len(est.batches)}")
        return est

    @classmethod
    def from_values(cls, profile: Profile, k_hat, tracked=None):
        """Synthetic estimate whose k_hat equals the given matrix (T = 1)."""
        est = cls(profile, tracked)
        est.S = np.asarray(k_hat, dtype=float) / profile.params.N
        est.T = 1.0
        return est

    # -- reads ----------------------------------------------------------------
    @property
    def positions(self):
        return self.params.positions[self.tracked]

    @property
    def k_hat(self) -> np.ndarray:
        if not self.T > 0:
            raise ValueError("no time accumulated yet")
        return self.params.N * self.S / self.T

    @property
    def stderr(self) -> np.ndarray:
        """Batch-means standard error of k_hat (NaN with fewer than two batches)."""
        if len(self.batches) < 2:
            return np.full_like(self.S, np.nan)
        # weighted batch means, valid for batches of unequal length
        N = self.params.N
        B = len(self.batches)
        mean = self.k_hat
        acc = np.zeros_like(self.S)
        for S, dT in self.batches:
            acc += (dT / self.T) ** 2 * (N * S / dT - mean) ** 2
        return np.sqrt(acc * B / (B - 1))

    def pairs(self, min_separation=1):
        """Index arrays (p, q) into the tracked list with p < q and site gap >= min_separation."""
        p, q = np.triu_indices(self.tracked.size, 1)
        keep = np.abs(self.tracked[q] - self.tracked[p]) >= min_separation
        return p[keep], q[keep]

    def write_csv(self, path, tag="steady two-point kernel estimate N*<etabar_i etabar_j>"):
        x = self.positions
        k = self.k_hat
        se = self.stderr
        p, q = self.pairs()
        rows = [(x[a], x[b], k[a, b], se[a, b]) for a, b in zip(p, q)]
        return write_csv(path, ["x", "y", "k_hat", "stderr"], rows, tag)


def regularity_functional(estimate: KernelEstimate, phi, dphi=None) -> float:
    """Pi_hat(d1 phi) / |phi|_2 with Pi_hat(psi) = (1/4) <k_hat, psi>.

    Lattice quadrature with cell area (stride/N)^2 over off-diagonal tracked
    pairs.  ``dphi`` is the analytic d1 phi; without it a forward difference
    with step 1/N is used.
    """
    N = estimate.params.N
    x = estimate.positions
    X, Y = np.meshgrid(x, x, indexing="ij")
    if dphi is None:
        d1 = N * (phi(X + 1.0 / N, Y) - phi(X, Y))
    else:
        d1 = dphi(X, Y)
    cell = (estimate.stride / N) ** 2
    off = ~np.eye(x.size, dtype=bool)
    num = 0.25 * cell * np.sum((estimate.k_hat * d1)[off])
    # |phi|_2 on the square from a fine tensor grid
    z = np.linspace(-1, 1, 401)
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    vals = np.asarray(phi(Z1, Z2), dtype=float) ** 2
    w = np.full(z.size, z[1] - z[0])
    w[0] = w[-1] = 0.5 * (z[1] - z[0])
    nrm = np.sqrt(w @ vals @ w)
    return float(num / nrm) if nrm > 0 else 0.0
