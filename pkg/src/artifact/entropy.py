"""Relative-entropy bench on tiny lattices.

Jump rates of the generator are (N^2/2) c_h(eta, eta'), where c_h is the
tilted rate c(eta, eta') exp(Pi(eta') - Pi(eta)).  ``carre_du_champ`` and
``adjoint_one`` use c_h itself; the production bound restores the N^2/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dynamics import (GeneratorMatrix, MeasureVector, build_generator, evolve_master,
                       invariant_measure, transitions)
from .io import write_csv
from .kernel_pde import TriangleGrid, g_from_k, k0_grid, profile_on
from .lattice import Params, steady_profile
from .measures import GaussianMeasureSpec, exact_gaussian_measure


def _probs(m) -> np.ndarray:
    return m.probs if isinstance(m, MeasureVector) else np.asarray(m, dtype=float)


def relative_entropy(mu, nu) -> float:
    """sum mu log(mu/nu) with 0 log 0 = 0; +inf if mu charges a nu-null state."""
    p, q = _probs(mu), _probs(nu)
    if p.shape != q.shape:
        raise ValueError("measures live on different state spaces")
    s = p > 0
    if np.any(q[s] <= 0):
        return math.inf
    return float(math.fsum(p[s] * np.log(p[s] / q[s])))


def tilted_rates(params: Params, h=None):
    """(source, target, c_h) with the N^2/2 time scale removed."""
    src, dst, rate = transitions(params, h)
    return src, dst, rate * (2.0 / params.N ** 2)


def carre_du_champ(f, params: Params, h, nu) -> float:
    """nu(Gamma_h(sqrt f)) = (1/4) sum_eta nu(eta) sum_eta' c_h(eta, eta') (sqrt f' - sqrt f)^2."""
    src, dst, c = tilted_rates(params, h)
    r = np.sqrt(np.asarray(f, dtype=float))
    q = _probs(nu)
    return 0.25 * float(math.fsum(q[src] * c * (r[dst] - r[src]) ** 2))


def carre_du_champ_terms(f, params: Params, h) -> np.ndarray:
    """Per-state Gamma_h(sqrt f)(eta) before integrating against nu."""
    src, dst, c = tilted_rates(params, h)
    r = np.sqrt(np.asarray(f, dtype=float))
    return 0.25 * np.bincount(src, weights=c * (r[dst] - r[src]) ** 2, minlength=1 << params.n_sites)


def adjoint_one(params: Params, h, nu) -> np.ndarray:
    """(L*_h 1)(eta) = sum_eta' [c_h(eta', eta) nu(eta')/nu(eta) - c_h(eta, eta')]."""
    q = _probs(nu)
    if np.any(q <= 0):
        raise ValueError("reference measure must be strictly positive")
    src, dst, c = tilted_rates(params, h)
    S = 1 << params.n_sites
    inflow = np.bincount(dst, weights=c * q[src], minlength=S) / q
    outflow = np.bincount(src, weights=c, minlength=S)
    return inflow - outflow


def reference_measure(params: Params, g=None) -> MeasureVector:
    """nu^N_g for a kernel g (None: the product measure at the steady profile)."""
    return exact_gaussian_measure(GaussianMeasureSpec(g, steady_profile(params)))


# ---------------------------------------------------------------------------
# entropy production


@dataclass
class ProductionReport:
    times: np.ndarray
    H: np.ndarray
    dH: np.ndarray
    bound: np.ndarray
    dissipation: np.ndarray
    source: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        """bound - dH/dt, nonnegative when the inequality holds."""
        return self.bound - self.dH

    @property
    def worst_margin(self) -> float:
        return float(self.margin.min())

    def holds(self, tol=1e-8) -> bool:
        return self.worst_margin >= -tol


def entropy_production_check(gen: GeneratorMatrix, nu, series, times, h=None) -> ProductionReport:
    """Compare dH/dt with -2N^2 nu(Gamma(sqrt f)) + (N^2/2) nu(f L*1) along ``series``.

    dH/dt = sum (L^T mu)(eta) log f(eta) comes from the forward equation.
    """
    p = gen.params
    q = _probs(nu)
    LT = gen.matrix.T.tocsr()
    Lstar = adjoint_one(p, h, q)
    n2 = float(p.N ** 2)
    H, dH, bound, diss, srcs = [], [], [], [], []
    for m in series:
        mu = _probs(m)
        f = mu / q
        H.append(relative_entropy(mu, q))
        pos = mu > 0
        dmu = LT @ mu
        if np.any(dmu[~pos] > 0):
            dH.append(math.inf)  # entropy leaves a boundary state: derivative is -log 0
        else:
            dH.append(math.fsum(dmu[pos] * np.log(f[pos])))
        d = 2.0 * n2 * carre_du_champ(f, p, h, q)
        s = 0.5 * n2 * math.fsum(q * f * Lstar)
        diss.append(d)
        srcs.append(s)
        bound.append(s - d)
    arr = lambda v: np.asarray(v, dtype=float)
    return ProductionReport(arr(times), arr(H), arr(dH), arr(bound), arr(diss), arr(srcs))


# ---------------------------------------------------------------------------
# decay experiment


def g0_on_lattice(params: Params, M: int = 120):
    """Callable g0(x, y) bilinearly interpolated from the kernel-pde grid."""
    grid = TriangleGrid(M)
    prof = steady_profile(params)
    g = g_from_k(k0_grid(grid, prof.rho_prime), profile_on(grid, prof), grid)
    interp = RegularGridInterpolator((grid.x, grid.x), g)
    return lambda X, Y: interp(np.stack(np.broadcast_arrays(X, Y), axis=-1))


@dataclass
class EntropySeries:
    N: int
    reference: str
    times: np.ndarray
    H: np.ndarray
    production: ProductionReport
    plateau: float
    plateau_exact: float
    plateau_settled: bool
    decay_rate: float
    extra: dict = field(default_factory=dict)

    def rows(self):
        pr = self.production
        for t, H, b, m in zip(self.times, self.H, pr.bound, pr.margin):
            yield self.N, self.reference, t, H, b, m

    def summary(self) -> dict:
        return {
            "N": self.N, "reference": self.reference, "plateau": self.plateau,
            "plateau_exact": self.plateau_exact, "plateau_settled": self.plateau_settled,
            "decay_rate": self.decay_rate, "worst_margin": self.production.worst_margin,
            **self.extra,
        }


def default_times(t_max=50.0, n=100) -> np.ndarray:
    return np.concatenate(([0.0], np.geomspace(1e-3, t_max, n - 1)))


def _decay_fit(times, H, plateau):
    """Slope of log(H - plateau) over the window where the excess is resolvable."""
    ex = np.abs(H - plateau)
    keep = (times > 0) & (ex > 1e-6 * max(ex.max(), 1e-300)) & (ex < 0.5 * ex.max())
    if keep.sum() < 3:
        return float("nan")
    return float(-np.polyfit(times[keep], np.log(ex[keep]), 1)[0])


def entropy_decay_experiment(params: Params, g=None, h=None, t_grid=None, reference="zero",
                             rtol=1e-10, atol=1e-14) -> EntropySeries:
    """H(f_t nu | nu) for the dynamics started from the product measure at the steady profile."""
    t_grid = default_times() if t_grid is None else np.asarray(t_grid, dtype=float)
    gen = build_generator(params, h)
    nu = reference_measure(params, g)
    start = reference_measure(params, None)
    series = evolve_master(gen, start, t_grid, rtol=rtol, atol=atol)
    prod = entropy_production_check(gen, nu, series, t_grid, h)
    H = prod.H
    plateau = float(H[-1])
    # settled: H moves by < 1% over the last decade of t
    last = t_grid >= t_grid[-1] / 10
    settled = bool(np.ptp(H[last]) <= 0.01 * max(abs(plateau), 1e-300))
    exact = relative_entropy(invariant_measure(gen), nu)
    return EntropySeries(params.N, reference, t_grid, H, prod, plateau, exact, settled,
                         _decay_fit(t_grid, H, plateau))


def plateau_scan(Ns=(3, 4, 5), rho_prime=0.3, rho_mid=0.5, t_grid=None):
    """Entropy series for g = 0 and g = g0 at each N (h = 0)."""
    out = []
    for N in Ns:
        p = Params(N, rho_mid - rho_prime, rho_mid + rho_prime)
        out.append(entropy_decay_experiment(p, None, None, t_grid, "zero"))
        out.append(entropy_decay_experiment(p, g0_on_lattice(p), None, t_grid, "g0"))
    return out


def fit_plateau_power(Ns, plateaus) -> float:
    """Log-log slope of the plateau against N (diagnostic only)."""
    return float(np.polyfit(np.log(Ns), np.log(plateaus), 1)[0])


def lsi_estimate(params: Params, h, nu, n_trials=200, seed=0) -> float:
    """Crude lower estimate of the log-Sobolev ratio H / Gamma over random densities."""
    rng = np.random.default_rng(seed)
    q = _probs(nu)
    best = 0.0
    for _ in range(n_trials):
        f = np.exp(rng.normal(scale=rng.uniform(0.1, 2.0), size=q.size))
        f /= q @ f
        gam = carre_du_champ(f, params, h, q)
        if gam > 0:
            best = max(best, relative_entropy(q * f, q) / gam)
    return best


def write_series_csv(path, series_list):
    rows = [r for s in series_list for r in s.rows()]
    return write_csv(path, ["N", "reference", "t", "H", "production_bound", "margin"], rows,
                     "relative entropy H(f_t nu | nu) with its production bound",
                     {"t": "macroscopic time", "H": "nat", "production_bound": "nat/time",
                      "margin": "nat/time"})


__all__ = [
    "relative_entropy", "tilted_rates", "carre_du_champ", "carre_du_champ_terms", "adjoint_one",
    "reference_measure", "ProductionReport", "entropy_production_check", "g0_on_lattice",
    "EntropySeries", "default_times", "entropy_decay_experiment", "plateau_scan",
    "fit_plateau_power", "lsi_estimate", "write_series_csv",
]
