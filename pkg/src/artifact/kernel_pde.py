"""Correlation-kernel numerics on the square [-1, 1]^2.

Kernels are symmetric functions on the square that are smooth on each of
the two triangles {x < y} and {x > y} but may have a kink across the
diagonal.  On a uniform grid with M cells per side every kernel is stored as
a full symmetric ``(M+1, M+1)`` array; the values on the closed upper
triangle determine it.  The jump of a kernel ``u`` across the diagonal is

    jump_u(x) = (d2 - d1) u(x, x+) = (d1 - d2) u(x+, x),

evaluated from the upper-triangle side.

Two discretisations of the Laplacian share the same unknowns (upper
triangle nodes off the Dirichlet sides x = -1 and y = 1):

* a strong five-point stencil with ghost values across the diagonal that
  carry prescribed jump data (``laplacian_solve``);
* the symmetric Dirichlet form ``E(u, v) = <grad u, grad v>`` assembled from
  forward differences, whose natural boundary condition on the diagonal is
  a zero jump.  Variational problems (the Euler-Lagrange equation and the
  rate functional) are discretised with this form so that discrete
  optimality conditions hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import Profile

#: lower bound on the Dirichlet/Neumann spectral gap of the triangle
POINCARE_GAP = np.pi ** 2 / 4


class ContractionError(RuntimeError):
    """A fixed-point iteration failed to contract."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class SpectralError(RuntimeError):
    """A kernel operator is not positive definite on the grid."""


# ---------------------------------------------------------------------------
# grid


class TriangleGrid:
    """Uniform grid on the square restricted to the closed upper triangle.

    Node classes: ``INTERIOR`` (x < y off the Dirichlet sides), ``DIRICHLET``
    (x = -1 or y = 1, corners included) and ``NEUMANN`` (the open diagonal).
    Lower-triangle nodes are tagged ``MIRROR``.
    """

    INTERIOR, DIRICHLET, NEUMANN, MIRROR = 0, 1, 2, 3

    def __init__(self, M: int):
        if int(M) != M or M < 8:
            raise ValueError(f"grid resolution must be an integer >= 8, got {M!r}")
        self.M = M = int(M)
        self.dx = 2.0 / M
        self.x = np.linspace(-1.0, 1.0, M + 1)
        self.xmid = 0.5 * (self.x[1:] + self.x[:-1])
        w = np.full(M + 1, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        self.w = w

        a, b = np.triu_indices(M + 1)
        keep = (a >= 1) & (b <= M - 1)
        self.ua, self.ub = a[keep], b[keep]
        self.n_unknowns = self.ua.size
        index = -np.ones((M + 1, M + 1), dtype=np.int64)
        index[self.ua, self.ub] = np.arange(self.n_unknowns)
        index[self.ub, self.ua] = np.arange(self.n_unknowns)
        self.index = index
        self.on_diagonal = self.ua == self.ub

        cls = np.full((M + 1, M + 1), self.MIRROR, dtype=np.int8)
        iu = np.triu_indices(M + 1)
        cls[iu] = self.INTERIOR
        cls[0, :] = self.DIRICHLET
        cls[:, M] = self.DIRICHLET
        diag = np.arange(1, M)
        cls[diag, diag] = self.NEUMANN
        cls[0, 0] = cls[M, M] = self.DIRICHLET
        self.node_class = cls

        # forward differences in the first variable: (D u)[c, b] ~ d1 u(xmid_c, x_b)
        self.D = (np.eye(M, M + 1, 1) - np.eye(M, M + 1)) / self.dx

        self._lap = None
        self._lap_lu = None
        self._form = None
        self._form_lu = None
        self._prolong = None

    # -- helpers ----------------------------------------------------------
    def mesh(self):
        return np.meshgrid(self.x, self.x, indexing="ij")

    def to_full(self, vec: np.ndarray) -> np.ndarray:
        """Symmetric full array from values on the unknowns (zero elsewhere)."""
        out = np.zeros((self.M + 1, self.M + 1))
        out[self.ua, self.ub] = vec
        out[self.ub, self.ua] = vec
        return out

    def to_vec(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[self.ua, self.ub]

    def sample(self, fn) -> np.ndarray:
        """Evaluate a symmetric function ``fn(x, y)`` on the upper triangle."""
        X, Y = self.mesh()
        lo, hi = np.minimum(X, Y), np.maximum(X, Y)
        return np.asarray(fn(lo, hi), dtype=float)

    def apply_dirichlet(self, full: np.ndarray) -> np.ndarray:
        out = np.array(full, dtype=float)
        out[0, :] = out[-1, :] = 0.0
        out[:, 0] = out[:, -1] = 0.0
        return out

    @property
    def prolongation(self):
        """Sparse map from unknowns to the row-major full array."""
        if self._prolong is None:
            n = self.M + 1
            rows = np.concatenate([self.ua * n + self.ub,
                                   (self.ub * n + self.ua)[~self.on_diagonal]])
            cols = np.concatenate([np.arange(self.n_unknowns),
                                   np.arange(self.n_unknowns)[~self.on_diagonal]])
            self._prolong = sp.csr_matrix(
                (np.ones(rows.size), (rows, cols)), shape=(n * n, self.n_unknowns))
        return self._prolong

    def full_gradient_to_unknowns(self, grad_full: np.ndarray) -> np.ndarray:
        """Chain rule through the symmetric extension (P^T applied to a full array)."""
        g = np.asarray(grad_full)
        out = g[self.ua, self.ub] + g[self.ub, self.ua]
        out[self.on_diagonal] *= 0.5
        return out

    # -- quadrature -------------------------------------------------------
    def inner(self, u, v) -> float:
        """Trapezoid L2 inner product on the square."""
        return float(self.w @ (np.asarray(u) * np.asarray(v)) @ self.w)

    def norm(self, u) -> float:
        return np.sqrt(max(self.inner(u, u), 0.0))

    def diagonal_integral(self, u) -> float:
        """Trapezoid integral of the trace u(x, x)."""
        return float(self.w @ np.diagonal(np.asarray(u)))

    def dirichlet_form(self, u, v) -> float:
        """E(u, v) ~ <grad u, grad v> over the square (symmetric u, v)."""
        du = self.D @ u
        dv = self.D @ v
        return float(2.0 * self.dx * np.sum((du * dv) @ self.w))

    def grad_norm(self, u) -> float:
        return np.sqrt(max(self.dirichlet_form(u, u), 0.0))

    # -- operators --------------------------------------------------------
    @property
    def laplacian(self):
        """Strong five-point operator on the unknowns (jump data enters the rhs)."""
        if self._lap is None:
            self._lap = self._build_laplacian()
        return self._lap

    def _build_laplacian(self):
        M, h2 = self.M, self.dx ** 2
        idx = self.index
        rows, cols, vals = [], [], []
        k = np.arange(self.n_unknowns)
        a, b = self.ua, self.ub
        rows.append(k)
        cols.append(k)
        vals.append(np.full(k.size, -4.0 / h2))
        off = ~self.on_diagonal
        # off the diagonal every neighbour sits in the closed upper triangle
        for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            na, nb = a[off] + da, b[off] + db
            ok = (na >= 1) & (nb <= M - 1)
            rows.append(k[off][ok])
            cols.append(idx[na[ok], nb[ok]])
            vals.append(np.full(ok.sum(), 1.0 / h2))
        # diagonal nodes: ghost values mirror the upper neighbours
        on = self.on_diagonal
        for da, db in ((0, 1), (-1, 0)):
            na, nb = a[on] + da, b[on] + db
            ok = (na >= 1) & (nb <= M - 1)
            rows.append(k[on][ok])
            cols.append(idx[na[ok], nb[ok]])
            vals.append(np.full(ok.sum(), 2.0 / h2))
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_unknowns, self.n_unknowns))

    @property
    def form_matrix(self):
        """Matrix of the Dirichlet form on the unknowns: E(u, v) = u^T A v."""
        if self._form is None:
            P = self.prolongation
            DtD = sp.csr_matrix(self.D.T @ self.D)
            E_full = 2.0 * self.dx * sp.kron(DtD, sp.diags(self.w), format="csr")
            self._form = sp.csc_matrix(P.T @ E_full @ P)
        return self._form

    def jump_rhs(self, jump_mid: np.ndarray) -> np.ndarray:
        """Right-hand side correction carrying jump data at the diagonal nodes."""
        out = np.zeros(self.n_unknowns)
        a = self.ua[self.on_diagonal]
        out[self.on_diagonal] = (jump_mid[a] + jump_mid[a - 1]) / self.dx
        return out

    def midpoint_values(self, data) -> np.ndarray:
        """Jump data as values at the M cell midpoints of the diagonal."""
        if data is None:
            return np.zeros(self.M)
        if callable(data):
            return np.asarray(data(self.xmid), dtype=float) * np.ones(self.M)
        data = np.asarray(data, dtype=float)
        if data.ndim == 0:
            return np.full(self.M, float(data))
        if data.size == self.M:
            return data
        if data.size == self.M + 1:
            return 0.5 * (data[1:] + data[:-1])
        raise ValueError(f"jump data must have {self.M} or {self.M + 1} entries")

    def solve_laplacian(self, rhs_full, jump=None) -> np.ndarray:
        if self._lap_lu is None:
            self._lap_lu = spla.splu(self.laplacian)
        rhs = self.to_vec(rhs_full) + self.jump_rhs(self.midpoint_values(jump))
        return self.to_full(self._lap_lu.solve(rhs))

    def solve_form(self, load: np.ndarray) -> np.ndarray:
        """Solve A u = load for a load vector on the unknowns."""
        if self._form_lu is None:
            self._form_lu = spla.splu(self.form_matrix)
        return self.to_full(self._form_lu.solve(load))

    def apply_laplacian(self, u_full, jump=None) -> np.ndarray:
        """Strong discrete Laplacian of ``u`` at the unknowns, as a full array."""
        vec = self.laplacian @ self.to_vec(u_full) - self.jump_rhs(self.midpoint_values(jump))
        return self.to_full(vec)

    def interior_laplacian(self, u_full) -> np.ndarray:
        """Five-point Laplacian at strictly interior upper-triangle nodes (others NaN)."""
        u = np.asarray(u_full)
        out = np.full_like(u, np.nan, dtype=float)
        h2 = self.dx ** 2
        lap = (u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4 * u[1:-1, 1:-1]) / h2
        out[1:-1, 1:-1] = lap
        out[self.node_class != self.INTERIOR] = np.nan
        return out

    def trace(self, u) -> np.ndarray:
        return np.diagonal(np.asarray(u)).copy()

    def jump(self, u) -> np.ndarray:
        """Diagonal jump of a grid kernel at the nodes, by one-sided differences.

        Second-order one-sided differences are used where two neighbours
        exist on the upper triangle and first-order ones near the corners.
        """
        u = np.asarray(u)
        M, h = self.M, self.dx
        out = np.zeros(M + 1)
        for a in range(M + 1):
            if a + 2 <= M:
                d2 = (-3 * u[a, a] + 4 * u[a, a + 1] - u[a, a + 2]) / (2 * h)
            elif a + 1 <= M:
                d2 = (u[a, a + 1] - u[a, a]) / h
            else:
                d2 = np.nan
            if a - 2 >= 0:
                d1 = (3 * u[a, a] - 4 * u[a - 1, a] + u[a - 2, a]) / (2 * h)
            elif a - 1 >= 0:
                d1 = (u[a, a] - u[a - 1, a]) / h
            else:
                d1 = np.nan
            out[a] = d2 - d1
        # corners: linear extrapolation from the neighbouring diagonal nodes
        out[0] = 2 * out[1] - out[2]
        out[M] = 2 * out[M - 1] - out[M - 2]
        return out

    def smallest_eigenvalue(self) -> float:
        """Smallest eigenvalue of the mixed Dirichlet/diagonal-Neumann Laplacian.

        Computed as the generalised problem A v = lam B v with B the lumped
        trapezoid mass of the square restricted to the unknowns.
        """
        wa, wb = self.w[self.ua], self.w[self.ub]
        mass = np.where(self.on_diagonal, wa * wb, 2 * wa * wb)
        B = sp.diags(mass, format="csc")
        vals = spla.eigsh(self.form_matrix, k=1, M=B, sigma=0.0, which="LM",
                          return_eigenvectors=False)
        return float(vals[0])


# ---------------------------------------------------------------------------
# closed forms


def k0_eval(x, y, rho_prime):
    """-(rho')^2/2 (1 + min) (1 - max), the steady correlation kernel."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    return -0.5 * rho_prime ** 2 * (1 + lo) * (1 - hi)


def k0_grid(grid: TriangleGrid, rho_prime: float) -> np.ndarray:
    X, Y = grid.mesh()
    return k0_eval(X, Y, rho_prime)


def profile_on(grid: TriangleGrid, profile: Profile, where="nodes"):
    x = grid.x if where == "nodes" else grid.xmid
    return profile.sigma(x)


# ---------------------------------------------------------------------------
# bilinear map and operator algebra


def bilinear_M(u, v, sigma_nodes, grid: TriangleGrid) -> np.ndarray:
    """M(u, v)(x, y) = int u(z, x) sigma(z) v(z, y) dz by the trapezoid rule."""
    return np.asarray(u).T @ ((grid.w * sigma_nodes)[:, None] * np.asarray(v))


def bilinear_M_d1(u, v, sigma_mid, grid: TriangleGrid) -> np.ndarray:
    """M(d1 u, d1 v): midpoint rule on cells, forward differences inside each cell.

    Kinks of ``u`` and ``v`` sit on grid nodes, so every cell sees a smooth
    integrand and the rule stays second order.
    """
    du = grid.D @ u
    dv = grid.D @ v
    return grid.dx * du.T @ (sigma_mid[:, None] * dv)


def _weighted_sym(kernel, sigma_nodes, grid):
    sw = np.sqrt(grid.w)
    return np.diag(sigma_nodes) + sw[:, None] * np.asarray(kernel) * sw[None, :]


@dataclass
class KernelOperator:
    """Nystrom form of C_k = sigma + k on the grid nodes.

    ``matrix`` acts on nodal values: (C f)_a = sigma_a f_a + sum_b w_b k_ab f_b.
    """

    kernel: np.ndarray
    sigma_nodes: np.ndarray
    grid: TriangleGrid = field(repr=False)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.sigma_nodes) + self.kernel * self.grid.w[None, :]

    def symmetric(self) -> np.ndarray:
        """W^{1/2} C W^{-1/2}, symmetric in the Euclidean sense."""
        return _weighted_sym(self.kernel, self.sigma_nodes, self.grid)

    def apply(self, f):
        return self.matrix @ f

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.symmetric())[0])

    def inverse_kernel(self) -> np.ndarray:
        """Kernel g with C^{-1} = sigma^{-1} - g."""
        C = self.symmetric()
        lam = np.linalg.eigvalsh(C)
        if lam[0] <= 0:
            raise SpectralError(f"operator sigma + k is not positive definite "
                                f"(smallest eigenvalue {lam[0]:.3e})")
        sw = np.sqrt(self.grid.w)
        # sigma^{-1} - C^{-1} = (C^{-1} K_w) sigma^{-1} with K_w the weighted kernel,
        # which avoids subtracting two O(1) matrices
        Kw = sw[:, None] * self.kernel * sw[None, :]
        X = np.linalg.solve(C, Kw) / self.sigma_nodes[None, :]
        g = X / (sw[:, None] * sw[None, :])
        return 0.5 * (g + g.T)


def g_from_k(k, sigma_nodes, grid: TriangleGrid) -> np.ndarray:
    """g = sigma^{-1} - (sigma + k)^{-1} as a kernel on the grid."""
    return KernelOperator(np.asarray(k), sigma_nodes, grid).inverse_kernel()


def k_from_g(g, sigma_nodes, grid: TriangleGrid) -> np.ndarray:
    """k = (sigma^{-1} - g)^{-1} - sigma as a kernel on the grid."""
    sw = np.sqrt(grid.w)
    inv_s = 1.0 / sigma_nodes
    Gw = sw[:, None] * np.asarray(g) * sw[None, :]
    U = np.diag(inv_s) - Gw
    lam = np.linalg.eigvalsh(U)
    if lam[0] <= 0:
        raise SpectralError(f"operator sigma^-1 - g is not positive definite "
                            f"(smallest eigenvalue {lam[0]:.3e})")
    # U^{-1} - s = U^{-1} (G_w s), solved without cancellation
    Y = np.linalg.solve(U, Gw * sigma_nodes[None, :])
    k = Y / (sw[:, None] * sw[None, :])
    return 0.5 * (k + k.T)


# ---------------------------------------------------------------------------
# bias specification


@dataclass
class BiasSpec:
    """A symmetric bias kernel on the grid together with its size metadata."""

    values: np.ndarray
    grid: TriangleGrid = field(repr=False)
    jump: np.ndarray | None = None
    eps: float | None = None

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def sup_d1(self) -> float:
        return float(np.max(np.abs(self.grid.D @ self.values)))

    @property
    def corner_jumps(self):
        j = self.jump_nodes
        return float(j[0]), float(j[-1])

    @property
    def jump_nodes(self) -> np.ndarray:
        if self.jump is None:
            return self.grid.jump(self.values)
        j = np.asarray(self.jump, dtype=float)
        if j.ndim == 0:
            return np.full(self.grid.M + 1, float(j))
        if j.size == self.grid.M:
            # midpoint data: extend to nodes by averaging and linear extrapolation
            mid = 0.5 * (j[1:] + j[:-1])
            return np.concatenate(([2 * j[0] - mid[0]], mid, [2 * j[-1] - mid[-1]]))
        return j

    def jump_mid(self) -> np.ndarray:
        if self.jump is None:
            return self.grid.midpoint_values(self.grid.jump(self.values))
        return self.grid.midpoint_values(self.jump)

    def in_ball(self, eps: float | None = None) -> bool:
        eps = self.eps if eps is None else eps
        return self.sup_norm <= eps * (1 + 1e-12) and self.sup_d1 <= eps * (1 + 1e-12)

    def as_dict(self):
        lo, hi = self.corner_jumps
        return {"eps": self.eps, "sup_norm": self.sup_norm, "sup_d1": self.sup_d1,
                "corner_jump_minus": lo, "corner_jump_plus": hi,
                "in_ball": self.in_ball() if self.eps is not None else None}


def as_bias(h, grid: TriangleGrid, eps=None) -> BiasSpec:
    if isinstance(h, BiasSpec):
        return h
    if h is None:
        return BiasSpec(np.zeros((grid.M + 1, grid.M + 1)), grid, jump=0.0, eps=eps)
    return BiasSpec(np.asarray(h, dtype=float), grid, eps=eps)


# ---------------------------------------------------------------------------
# fixed-point solvers


@dataclass
class SolveReport:
    kind: str
    iterations: int
    converged: bool
    increments: list
    residual: float = float("nan")
    contraction_ratio: float = float("nan")
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        out = {"kind": self.kind, "iterations": self.iterations,
               "converged": self.converged, "increments": list(map(float, self.increments)),
               "residual": float(self.residual),
               "contraction_ratio": float(self.contraction_ratio)}
        # array-valued extras (fields) stay out of reports
        out.update({k: v for k, v in self.extra.items() if np.ndim(v) == 0})
        return out


def _iterate(step, u0, grid, tol, max_iter, kind):
    """Plain iteration u <- step(u) until the gradient norm of the increment is <= tol."""
    u = u0
    increments = []
    growth = 0
    for it in range(1, max_iter + 1):
        new = step(u)
        inc = grid.grad_norm(new - u)
        increments.append(inc)
        u = new
        if inc <= tol:
            ratios = [b / a for a, b in zip(increments[:-1], increments[1:]) if a > 0]
            ratio = float(np.max(ratios[: max(1, len(ratios) // 2 + 1)])) if ratios else 0.0
            return u, SolveReport(kind, it, True, increments, contraction_ratio=ratio)
        if len(increments) > 1 and inc > increments[-2]:
            growth += 1
            if growth >= 10:
                raise ContractionError(f"{kind}: increments grew for 10 iterations", increments)
        else:
            growth = 0
    raise ContractionError(f"{kind}: no convergence in {max_iter} iterations "
                           f"(last increment {increments[-1]:.3e})", increments)


def q_form(h, kernel, sigma_nodes, sigma_mid, grid, h2=None) -> float:
    """int sigma(z) <d1 h(z, .), C_k d1 h2(z, .)> dz on the grid."""
    dh = grid.D @ h
    dh2 = dh if h2 is None else grid.D @ h2
    ck = np.diag(grid.w * sigma_nodes) + grid.w[:, None] * kernel * grid.w[None, :]
    return float(grid.dx * np.sum(sigma_mid[:, None] * (dh @ ck) * dh2))


def q_gradient(h, kernel, sigma_nodes, sigma_mid, grid) -> np.ndarray:
    """Gradient of h -> q_form(h, k) with respect to the unknowns."""
    ck = np.diag(grid.w * sigma_nodes) + grid.w[:, None] * kernel * grid.w[None, :]
    G = grid.D.T @ (sigma_mid[:, None] * (grid.D @ h)) @ ck
    full = grid.dx * (G + G.T)
    return grid.full_gradient_to_unknowns(full)


@dataclass
class PDEContext:
    grid: TriangleGrid
    profile: Profile
    sigma_nodes: np.ndarray = field(init=False, repr=False)
    sigma_mid: np.ndarray = field(init=False, repr=False)
    k0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma_nodes = self.profile.sigma(self.grid.x)
        self.sigma_mid = self.profile.sigma(self.grid.xmid)
        self.k0 = k0_grid(self.grid, self.profile.rho_prime)

    @property
    def rho_prime(self):
        return self.profile.rho_prime


def euler_lagrange_step(ctx: PDEContext, h):
    """The affine map k -> k0 + A^{-1} grad_h q(h; k) whose fixed point is k_h."""
    grid = ctx.grid

    def step(k):
        load = q_gradient(h, k, ctx.sigma_nodes, ctx.sigma_mid, grid)
        return ctx.k0 + grid.solve_form(load)

    return step


def solve_euler_lagrange(h, profile: Profile, grid: TriangleGrid, tol=1e-10, max_iter=200):
    """Correlation kernel k_h for which ``h`` is the optimal bias.

    The weak form  1/2 <grad(k - k0), grad phi> = int sigma <d1 h, C_k d1 phi>
    is iterated as k <- k0 + A^{-1}[...]; the jump condition on the diagonal is
    the natural boundary condition of the form.  Returns ``(k, report)``;
    ``report.extra['f']`` holds f = k - k0 - sigma h sigma.
    """
    ctx = PDEContext(grid, profile)
    hb = as_bias(h, grid)
    step = euler_lagrange_step(ctx, hb.values)
    k, report = _iterate(step, ctx.k0.copy(), grid, tol, max_iter, "euler-lagrange")
    f = k - ctx.k0 - ctx.sigma_nodes[:, None] * hb.values * ctx.sigma_nodes[None, :]
    report.extra["f"] = f
    report.residual = el_weak_residual(k, hb.values, ctx)
    return k, report


def el_weak_residual(k, h, ctx: PDEContext) -> float:
    """max-norm of A(k - k0) - grad_h q(h; k) on the unknowns."""
    grid = ctx.grid
    h = as_bias(h, grid).values
    lhs = grid.form_matrix @ grid.to_vec(k - ctx.k0)
    rhs = q_gradient(h, k, ctx.sigma_nodes, ctx.sigma_mid, grid)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def _drift(F, ratio, grid):
    """ratio(x) d1 F + ratio(y) d2 F at the unknowns, upper-triangle one-sided at D."""
    h = grid.dx
    out = np.zeros_like(F)
    c1 = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2 * h)
    c2 = (F[1:-1, 2:] - F[1:-1, :-2]) / (2 * h)
    out[1:-1, 1:-1] = ratio[1:-1, None] * c1 + ratio[None, 1:-1] * c2
    # on the diagonal d1 + d2 is the tangential derivative, which is continuous
    a = np.arange(1, grid.M)
    out[a, a] = ratio[a] * (F[a + 1, a + 1] - F[a - 1, a - 1]) / (2 * h)
    iu = np.triu_indices(grid.M + 1)
    out.T[iu] = out[iu]
    return out


def main_equation_residual(g, h, ctx: PDEContext, h_jump=None) -> np.ndarray:
    """Strong residual of the main equation at the unknowns (full array).

    Delta(g - h) + (s'/s)(x) d1(2g - h) + (s'/s)(y) d2(2g - h)
      + int s(z)[d1 g(z,x) d1(g-h)(z,y) + d1 g(z,y) d1(g-h)(z,x)] dz,
    with the Laplacian of g - h taken with its own diagonal jump, which the
    boundary condition fixes to (rho')^2 / sigma^2 plus the jump of h.
    """
    grid = ctx.grid
    h = as_bias(h, grid).values
    jump_u = ctx.rho_prime ** 2 / ctx.sigma_mid ** 2
    u = g - h
    lap = grid.apply_laplacian(u, jump_u)
    ratio = ctx.profile.sigma_prime(grid.x) / ctx.sigma_nodes
    res = lap + _drift(2 * g - h, ratio, grid) + bilinear_M_d1(g, u, ctx.sigma_mid, grid) \
        + bilinear_M_d1(u, g, ctx.sigma_mid, grid)
    return grid.apply_dirichlet(res)


def main_equation_step(ctx: PDEContext, h):
    grid = ctx.grid
    jump_u = ctx.rho_prime ** 2 / ctx.sigma_mid ** 2
    ratio = ctx.profile.sigma_prime(grid.x) / ctx.sigma_nodes

    def step(g):
        u = g - h
        rhs = -_drift(2 * g - h, ratio, grid) - bilinear_M_d1(g, u, ctx.sigma_mid, grid) \
            - bilinear_M_d1(u, g, ctx.sigma_mid, grid)
        return grid.solve_laplacian(rhs, jump_u) + h

    return step


def solve_main_equation(h, profile: Profile, grid: TriangleGrid, tol=1e-10, max_iter=200, g_init=None):
    """Reference kernel g_h from the main equation by fixed-point iteration.

    Each step solves Delta(g - h) = -[drift + nonlocal terms](g) with the
    jump (rho')^2/sigma^2 of g - h imposed as diagonal Neumann data.
    """
    ctx = PDEContext(grid, profile)
    hb = as_bias(h, grid)
    step = main_equation_step(ctx, hb.values)
    g0 = hb.values.copy() if g_init is None else np.asarray(g_init, dtype=float)
    g, report = _iterate(step, g0, grid, tol, max_iter, "main-equation")
    res = main_equation_residual(g, hb.values, ctx)
    report.residual = float(np.max(np.abs(res)))
    return g, report


def solve_poisson(phi, h, profile: Profile, grid: TriangleGrid, tol=1e-10, max_iter=200):
    """f with 1/2 Delta f + 1/2 M(d1 f, d1 h) + 1/2 M(d1 h, d1 f) = phi/|phi|_2.

    Zero on the sides x = -1, y = 1 and zero jump across the diagonal.
    """
    ctx = PDEContext(grid, profile)
    phi = np.asarray(phi, dtype=float)
    hv = as_bias(h, grid).values
    nrm = grid.norm(phi)
    if nrm == 0:
        zero = np.zeros_like(phi)
        return zero, SolveReport("poisson", 0, True, [], residual=0.0, contraction_ratio=0.0)
    src = 2.0 * phi / nrm

    def step(f):
        rhs = src - bilinear_M_d1(f, hv, ctx.sigma_mid, grid) - bilinear_M_d1(hv, f, ctx.sigma_mid, grid)
        return grid.solve_laplacian(rhs)

    f, report = _iterate(step, np.zeros_like(phi), grid, tol, max_iter, "poisson")
    res = 0.5 * grid.apply_laplacian(f) + 0.5 * (bilinear_M_d1(f, hv, ctx.sigma_mid, grid)
                                                  + bilinear_M_d1(hv, f, ctx.sigma_mid, grid)) - phi / nrm
    res = grid.apply_dirichlet(res)
    report.residual = grid.norm(res)
    return f, report


# ---------------------------------------------------------------------------
# contraction diagnostics


def contraction_bound(d_sup=0.0, xi_norm=0.0, grad_psi=0.0, alpha=POINCARE_GAP,
                      both_pairs=False) -> float:
    """alpha^{-1/2} (2 alpha^{-1/2} |d|_inf + alpha^{-1/2} |xi|_2 / 4 + |grad psi|_2 / 8).

    With ``both_pairs`` the nonlocal terms M(f, xi) + M(xi, f) and
    M(d1 f, d1 psi) + M(d1 psi, d1 f) each count twice, as the d f + f d
    term already does; that version is a valid bound for the maps here.
    """
    ra = alpha ** -0.5
    m = 2.0 if both_pairs else 1.0
    return ra * (2 * ra * d_sup + m * ra * xi_norm / 4 + m * grad_psi / 8)


def el_coefficients(h, ctx: PDEContext):
    """Coefficients (d, xi) of the linear part of the Euler-Lagrange map.

    d = sigma * jump_h, and xi is chosen so that the nonlocal part reads
    M(f, xi) + M(xi, f):  xi(z, y) = d_y(sigma(y) d1 h(y, z)) / sigma(z).
    """
    grid = ctx.grid
    hb = as_bias(h, grid)
    d = ctx.sigma_nodes * hb.jump_nodes
    # d_x(sigma(x) d1 h(x, z)) by centred differences of the midpoint fluxes
    flux = ctx.sigma_mid[:, None] * (grid.D @ hb.values)
    dflux = np.zeros_like(hb.values)
    dflux[1:-1, :] = (flux[1:, :] - flux[:-1, :]) / grid.dx
    dflux[0, :] = dflux[1, :]
    dflux[-1, :] = dflux[-2, :]
    xi = dflux.T / ctx.sigma_nodes[:, None]
    return d, xi


def random_symmetric(grid: TriangleGrid, rng, modes=8) -> np.ndarray:
    """Random smooth symmetric kernel vanishing on the boundary, with a diagonal kink."""
    X, Y = grid.mesh()
    lo, hi = np.minimum(X, Y), np.maximum(X, Y)
    out = np.zeros_like(X)
    for _ in range(modes):
        p, q = rng.integers(1, 6, size=2)
        c = rng.normal()
        out += c * np.sin(p * np.pi * (lo + 1) / 2) * np.sin(q * np.pi * (hi + 1) / 2)
    return out


def contraction_report(grid: TriangleGrid, h, profile: Profile, kind="euler-lagrange",
                       n_pairs=8, rng=None, power_steps=30):
    """Measured contraction ratio of the fixed-point map next to the analytic bound.

    The ratio |grad(S f1 - S f2)| / |grad(f1 - f2)| is sampled over random
    pairs and refined by power iteration on the linear part of S.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    ctx = PDEContext(grid, profile)
    hb = as_bias(h, grid)
    if kind == "euler-lagrange":
        step = euler_lagrange_step(ctx, hb.values)
        d, xi = el_coefficients(hb, ctx)
        parts = {"d_sup": float(np.max(np.abs(d))), "xi_norm": grid.norm(xi), "grad_psi": 0.0}
    elif kind == "poisson":
        hv = hb.values

        def step(f):
            rhs = -bilinear_M_d1(f, hv, ctx.sigma_mid, grid) - bilinear_M_d1(hv, f, ctx.sigma_mid, grid)
            return grid.solve_laplacian(rhs)

        parts = {"d_sup": 0.0, "xi_norm": 0.0, "grad_psi": grid.grad_norm(hv)}
    else:
        raise ValueError(f"unknown map kind {kind!r}")

    base = step(np.zeros_like(hb.values))

    def linear(v):
        return step(v) - base

    ratios = []
    for _ in range(n_pairs):
        f1 = random_symmetric(grid, rng)
        f2 = random_symmetric(grid, rng)
        den = grid.grad_norm(f1 - f2)
        if den > 0:
            ratios.append(grid.grad_norm(step(f1) - step(f2)) / den)
    v = random_symmetric(grid, rng)
    for _ in range(power_steps):
        nv = linear(v)
        den = grid.grad_norm(v)
        num = grid.grad_norm(nv)
        if den == 0 or num == 0:
            ratios.append(0.0)
            break
        ratios.append(num / den)
        v = nv / num
    measured = float(max(ratios)) if ratios else 0.0
    return {"kind": kind, "measured_ratio": measured,
            "analytic_bound": contraction_bound(**parts),
            "paired_bound": contraction_bound(**parts, both_pairs=True),
            "alpha": POINCARE_GAP, **{k: float(v) for k, v in parts.items()}}
