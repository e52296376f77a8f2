"""Rate functionals: J_h, its supremum over a bias basis, and Donsker-Varadhan rates.

All kernel quantities use the grid conventions of ``kernel_pde``: the
Dirichlet form E(u, v) ~ <grad u, grad v>, the bilinear form

    Q(h; k) = int sigma(z) <d1 h(z, .), C_k d1 h(z, .)> dz,

and trapezoid quadrature.  In this notation

    J_h(k) = E(k - k0, h) / 8 - Q(h; k) / 8,

which the four-term expression of ``eval_Jh`` reproduces exactly on the
grid.  J is affine in k and concave quadratic in h.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .dynamics import GeneratorMatrix, MeasureVector, build_generator
from .kernel_pde import (KernelOperator, PDEContext, SpectralError, TriangleGrid, as_bias,
                         bilinear_M_d1, k0_grid, q_form)
from .lattice import Params, mobility, steady_profile
from .measures import GaussianMeasureSpec, batch_means, exact_gaussian_measure, glauber_samples
from .lattice import all_configurations


class AdmissibilityError(ValueError):
    """The kernel operator sigma + k is not positive definite."""


# ---------------------------------------------------------------------------
# J_h and the supremum over a basis


@dataclass
class JhTerms:
    bulk: float
    trace: float
    boundary: float
    carre: float

    @property
    def total(self) -> float:
        return self.bulk + self.trace + self.boundary + self.carre

    def as_dict(self):
        return {"bulk": self.bulk, "trace": self.trace, "boundary": self.boundary,
                "carre_du_champ": self.carre, "total": self.total}


def eval_Jh(k, h, profile, grid: TriangleGrid) -> JhTerms:
    """J_h(k) as its four quadrature terms.

    bulk     -(1/8) <k, Delta h + M(d1 h, d1 h)>
    trace    (1/4) int tr(k)(x) (d2 - d1) h(x+, x) dx = -(1/4) int tr(k) jump_h
    boundary ((rho')^2/4) int h(x, x) dx
    carre    -(1/8) int int sigma(x) sigma(y) (d1 h)^2
    """
    ctx = PDEContext(grid, profile)
    hb = as_bias(h, grid)
    hv = hb.values
    k = np.asarray(k, dtype=float)
    jump = hb.jump_mid()
    lap = grid.apply_laplacian(hv, jump)
    nonlocal_ = bilinear_M_d1(hv, hv, ctx.sigma_mid, grid)
    bulk = -0.125 * (grid.inner(k, lap) + grid.inner(k, nonlocal_))
    a = np.arange(1, grid.M)
    jump_nodes = np.zeros(grid.M + 1)
    jump_nodes[a] = 0.5 * (jump[a] + jump[a - 1])
    trace = -0.25 * float(np.sum(grid.w * np.diagonal(k) * jump_nodes))
    boundary = 0.25 * ctx.rho_prime ** 2 * grid.diagonal_integral(hv)
    dh = grid.D @ hv
    carre = -0.125 * grid.dx * float(np.sum(ctx.sigma_mid[:, None] * dh ** 2
                                            * (grid.w * ctx.sigma_nodes)[None, :]))
    return JhTerms(bulk, trace, boundary, carre)


def jh_weak(k, h, profile, grid: TriangleGrid) -> float:
    """E(k - k0, h)/8 - Q(h; k)/8."""
    ctx = PDEContext(grid, profile)
    hv = as_bias(h, grid).values
    return 0.125 * grid.dirichlet_form(np.asarray(k) - ctx.k0, hv) \
        - 0.125 * q_form(hv, np.asarray(k), ctx.sigma_nodes, ctx.sigma_mid, grid)


def jh_at_optimum(k, h, profile, grid: TriangleGrid) -> float:
    """(1/8) int sigma <d1 h, C_k d1 h>, the value of J_h at its own kernel k_h."""
    ctx = PDEContext(grid, profile)
    return 0.125 * q_form(as_bias(h, grid).values, np.asarray(k), ctx.sigma_nodes,
                          ctx.sigma_mid, grid)


@dataclass
class RateReport:
    value: float
    coeffs: np.ndarray
    terms: dict
    condition: float
    linear: np.ndarray = field(repr=False)
    hessian: np.ndarray = field(repr=False)
    sup_norm: float = float("nan")
    sup_d1: float = float("nan")
    eps: float | None = None

    @property
    def in_ball(self):
        if self.eps is None:
            return None
        return bool(self.sup_norm <= self.eps and self.sup_d1 <= self.eps)

    def as_dict(self):
        return {"value": self.value, "coeffs": self.coeffs.tolist(), "terms": self.terms,
                "condition": self.condition, "sup_norm_h": self.sup_norm,
                "sup_d1_h": self.sup_d1, "eps": self.eps, "in_ball": self.in_ball}


def _basis_arrays(basis, grid):
    if hasattr(basis, "on_grid"):
        return basis.on_grid(grid)
    return np.stack([as_bias(b, grid).values for b in basis])


def rate_sup(k, basis, profile, grid: TriangleGrid, eps=None) -> RateReport:
    """Maximise J_h(k) over h = sum_m c_m psi_m.

    With b_m = E(k - k0, psi_m) and H_mn = Q(psi_m, psi_n; k),
    J = (c.b - c.H.c)/8, so c* = H^{-1} b / 2 and I = b.H^{-1}.b / 32.
    """
    ctx = PDEContext(grid, profile)
    k = np.asarray(k, dtype=float)
    op = KernelOperator(k[1:-1, 1:-1], ctx.sigma_nodes[1:-1],
                        _InteriorGrid(grid))
    lam = op.min_eigenvalue()
    if lam <= 0:
        raise AdmissibilityError(f"sigma + k is not positive definite (smallest eigenvalue {lam:.3e})")
    psi = _basis_arrays(basis, grid)
    P = psi.shape[0]
    A = grid.form_matrix
    dk = grid.to_vec(k - ctx.k0)
    b = np.array([dk @ (A @ grid.to_vec(p)) for p in psi])
    ck = np.diag(grid.w * ctx.sigma_nodes) + grid.w[:, None] * k * grid.w[None, :]
    Y = np.stack([grid.D @ p for p in psi])
    Z = np.einsum("mcb,bd->mcd", Y, ck)
    H = grid.dx * np.einsum("c,mcd,ncd->mn", ctx.sigma_mid, Z, Y)
    H = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= 0:
        raise AdmissibilityError(f"normal matrix is not positive definite (eigenvalue {ev[0]:.3e})")
    sol = np.linalg.solve(H, b)
    c = 0.5 * sol
    value = float(b @ sol) / 32.0
    h_star = np.tensordot(c, psi, axes=1)
    terms = eval_Jh(k, h_star, profile, grid).as_dict()
    return RateReport(value=value, coeffs=c, terms=terms, condition=float(ev[-1] / ev[0]),
                      linear=b, hessian=H, sup_norm=float(np.max(np.abs(h_star))),
                      sup_d1=float(np.max(np.abs(grid.D @ h_star))) if P else 0.0, eps=eps)


class _InteriorGrid:
    """Quadrature weights of the interior nodes, for spectral checks of sigma + k."""

    def __init__(self, grid):
        self.w = grid.w[1:-1]


# ---------------------------------------------------------------------------
# Donsker-Varadhan functionals on finite state spaces


def _require_positive(mu):
    p = np.asarray(mu.probs if isinstance(mu, MeasureVector) else mu, dtype=float)
    if np.any(p <= 0):
        raise ValueError("measure must be strictly positive")
    return p / p.sum()


def product_measure(params: Params, rho=None) -> MeasureVector:
    prof = steady_profile(params)
    r = prof.rho_bar if rho is None else np.full(params.n_sites, rho)
    conf = all_configurations(params.n_sites)
    return MeasureVector(np.prod(np.where(conf == 1, r, 1 - r), axis=1), params)


def dv_reversible(mu, params: Params) -> float:
    """nu(sqrt f (-N^2 L) sqrt f) with f = dmu/dnu_rho, for rho_- = rho_+."""
    if not params.reversible:
        raise ValueError("the Dirichlet-form expression needs rho_minus == rho_plus")
    p = _require_positive(mu)
    nu = product_measure(params).probs
    L = build_generator(params).matrix
    s = np.sqrt(p / nu)
    return float(-(nu * s) @ (L @ s))


def dv_edge_sum(mu, params: Params) -> float:
    """(N^2/4) sum over transitions nu(eta) c (sqrt f(eta') - sqrt f(eta))^2."""
    p = _require_positive(mu)
    nu = product_measure(params).probs
    from .dynamics import transitions
    src, dst, rate = transitions(params)
    s = np.sqrt(p / nu)
    # rates already carry N^2/2; each unordered edge appears twice
    return float(0.5 * np.sum(nu[src] * rate * (s[dst] - s[src]) ** 2))


def _dv_objective(mu, L):
    """F(h) = -sum_eta mu(eta) sum_eta' L(eta, eta') (e^{h'-h} - 1), gradient and Hessian."""
    L = L.tocoo()
    off = L.row != L.col
    r, c, q = L.row[off], L.col[off], L.data[off]
    S = mu.size

    def parts(h):
        e = np.exp(h[c] - h[r])
        m = mu[r] * q * e
        F = -float(np.sum(mu[r] * q * (e - 1.0)))
        g = np.zeros(S)
        np.add.at(g, r, m)
        np.add.at(g, c, -m)
        Hm = np.zeros((S, S))
        np.add.at(Hm, (r, r), -m)
        np.add.at(Hm, (c, c), -m)
        np.add.at(Hm, (r, c), m)
        np.add.at(Hm, (c, r), m)
        return F, g, Hm

    return parts


def dv_variational(mu, gen: GeneratorMatrix, restarts: int = 10, seed: int = 0,
                   gtol: float = 1e-12) -> float:
    """sup_u mu(-L u / u) over u = e^h, by trust-region Newton ascent with restarts.

    The objective is concave in h and invariant under h -> h + const, so h is
    pinned to zero at the first state.
    """
    p = _require_positive(mu)
    parts = _dv_objective(p, gen.matrix)
    S = p.size

    def full(x):
        return np.concatenate(([0.0], x))

    def fun(x):
        F, g, Hm = parts(full(x))
        return -F

    def jac(x):
        return -parts(full(x))[1][1:]

    def hess(x):
        return -parts(full(x))[2][1:, 1:]

    rng = np.random.default_rng(seed)
    best = 0.0  # h = 0 gives 0
    for k in range(restarts):
        x0 = np.zeros(S - 1) if k == 0 else rng.normal(scale=0.5, size=S - 1)
        res = minimize(fun, x0, jac=jac, hess=hess, method="trust-exact",
                       options={"gtol": gtol, "maxiter": 500})
        best = max(best, -float(res.fun))
    return best


# ---------------------------------------------------------------------------
# equilibrium asymptotics


def _logit(r):
    return np.log(r / (1 - r))


def density_dv(rho_hat, params: Params, mode: str = "exact", quad_points: int = 20001) -> float:
    """Rate of observing the product measure with density rho_hat (nonnegative).

    exact:     (N^2/4) sum_i E[c (exp(-(eta_{i+1} - eta_i) d^N lambda_i / (2N)) - 1)^2]
               in closed form over the pair (eta_i, eta_{i+1});
    continuum: (N/8) int sigma(rho_hat) |lambda'|^2.
    """
    N = params.N
    if mode == "exact":
        x = params.positions
        r = np.asarray(rho_hat(x), dtype=float) * np.ones(x.size)
        lam = _logit(r)
        a = 0.5 * (lam[1:] - lam[:-1])  # d^N lambda / (2N)
        p1 = r[:-1] * (1 - r[1:])        # eta_i = 1, eta_{i+1} = 0
        p2 = (1 - r[:-1]) * r[1:]
        terms = p1 * np.expm1(a) ** 2 + p2 * np.expm1(-a) ** 2
        return float(0.25 * N ** 2 * np.sum(terms))
    if mode == "continuum":
        z = np.linspace(-1, 1, quad_points)
        r = np.asarray(rho_hat(z), dtype=float) * np.ones(z.size)
        lam = _logit(r)
        dl = np.gradient(lam, z, edge_order=2)
        from scipy.integrate import simpson
        return float(N / 8.0 * simpson(mobility(r) * dl ** 2, x=z))
    raise ValueError(f"mode must be 'exact' or 'continuum', got {mode!r}")


def _phi_lattice(phi, params):
    x = params.positions
    X, Y = np.meshgrid(x, x, indexing="ij")
    vals = np.asarray(phi(X, Y), dtype=float) * np.ones_like(X)
    return 0.5 * (vals + vals.T)


def correlation_dv_samples(configs, phi, params: Params, rho: float) -> np.ndarray:
    """Per-configuration value of (1/16N^2) sum_i c_i (sum_{j not in {i,i+1}} etabar_j d1 phi_ij)^2."""
    N = params.N
    n = params.n_sites
    ph = _phi_lattice(phi, params)
    d1 = N * (ph[1:, :] - ph[:-1, :])          # bonds x sites
    bonds = np.arange(n - 1)
    mask = np.ones((n - 1, n))
    mask[bonds, bonds] = 0.0
    mask[bonds, bonds + 1] = 0.0
    # bonds with |i| < N-1, i.e. all but the leftmost
    keep = params.sites[:-1] > -N + 1
    d1 = (d1 * mask)[keep]
    E = np.asarray(configs, dtype=float) - rho
    c = (np.asarray(configs)[:, :-1] != np.asarray(configs)[:, 1:]).astype(float)[:, keep]
    S = E @ d1.T
    return np.sum(c * S ** 2, axis=1) / (16.0 * N ** 2)


def correlation_dv(phi, rho: float, params: Params, mode: str = "exact", *, samples: int = 200_000,
                   rng=0, M: int = 400):
    """Rate of observing the tilted measure e^{2 Pi(phi)} nu_rho / Z (nonnegative).

    exact (N <= 6) and mc (Metropolis samples): finite-N expression, returned
    as (value, stderr); continuum: (1/8) int sigma <d1 phi(z, .), C d1 phi(z, .)>
    with C = (sigma^{-1} - phi)^{-1}, returned as a float.
    """
    if mode == "continuum":
        z = np.linspace(-1, 1, M + 1)
        w = np.full(M + 1, 2.0 / M)
        w[0] = w[-1] = 1.0 / M
        s = mobility(rho)
        Z1, Z2 = np.meshgrid(z, z, indexing="ij")
        Phi = np.asarray(phi(Z1, Z2), dtype=float) * np.ones_like(Z1)
        sw = np.sqrt(w)
        U = np.eye(M + 1) / s - sw[:, None] * Phi * sw[None, :]
        if np.linalg.eigvalsh(U)[0] <= 0:
            raise AdmissibilityError("U_phi is not positive definite")
        Csym = np.linalg.inv(U)
        # d1 phi(z, x) by centred differences in z
        d1 = np.gradient(Phi, z, axis=0, edge_order=2)
        Dw = d1 * sw[None, :]
        vals = np.einsum("za,ab,zb->z", Dw, Csym, Dw)
        return float(0.125 * s * np.sum(w * vals))
    prof_params = Params(params.N, rho, rho)
    prof = steady_profile(prof_params)
    spec = GaussianMeasureSpec(lambda x, y: phi(x, y), prof)
    if mode == "exact":
        mv = exact_gaussian_measure(spec)
        conf = all_configurations(params.n_sites)
        vals = correlation_dv_samples(conf, phi, prof_params, rho)
        return float(mv.probs @ vals), 0.0
    if mode == "mc":
        S = glauber_samples(spec, samples, rng)
        vals = correlation_dv_samples(S, phi, prof_params, rho)
        return batch_means(vals)
    raise ValueError(f"mode must be 'exact', 'mc' or 'continuum', got {mode!r}")
