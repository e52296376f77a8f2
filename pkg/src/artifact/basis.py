"""Symmetric bias basis on the square.

Modes are symmetrised products of the Dirichlet sines
s_k(x) = sin(k pi (x + 1) / 2), normalised in L2 of the square and ordered by
a^2 + b^2.  They vanish on the boundary and have no kink on the diagonal, so
their jump across it is zero.
"""

from __future__ import annotations

import numpy as np

from .kernel_pde import BiasSpec, TriangleGrid


def mode_indices(P: int):
    """First ``P`` index pairs (a, b) with a <= b, ordered by (a^2 + b^2, a)."""
    if P < 1:
        raise ValueError("basis size must be positive")
    # the pairs (1, 1) ... (1, P) bound the first P norms, so b <= P suffices
    pairs = sorted(((a, b) for b in range(1, P + 1) for a in range(1, b + 1)),
                   key=lambda ab: (ab[0] ** 2 + ab[1] ** 2, ab[0]))
    return pairs[:P]


def sine(k, x):
    return np.sin(k * np.pi * (np.asarray(x, dtype=float) + 1) / 2)


def sine_d(k, x):
    return 0.5 * k * np.pi * np.cos(k * np.pi * (np.asarray(x, dtype=float) + 1) / 2)


def mode(a, b, x, y):
    """Normalised symmetric mode psi_ab(x, y)."""
    if a == b:
        return sine(a, x) * sine(a, y)
    return (sine(a, x) * sine(b, y) + sine(b, x) * sine(a, y)) / np.sqrt(2)


def mode_d1(a, b, x, y):
    """d/dx of psi_ab."""
    if a == b:
        return sine_d(a, x) * sine(a, y)
    return (sine_d(a, x) * sine(b, y) + sine_d(b, x) * sine(a, y)) / np.sqrt(2)


class SineBasis:
    """The first ``P`` symmetric modes."""

    def __init__(self, P: int):
        self.P = P
        self.pairs = mode_indices(P)

    def __len__(self):
        return self.P

    def evaluate(self, coeffs, x, y):
        coeffs = np.asarray(coeffs, dtype=float)
        return sum(c * mode(a, b, x, y) for c, (a, b) in zip(coeffs, self.pairs))

    def evaluate_d1(self, coeffs, x, y):
        coeffs = np.asarray(coeffs, dtype=float)
        return sum(c * mode_d1(a, b, x, y) for c, (a, b) in zip(coeffs, self.pairs))

    def on_grid(self, grid: TriangleGrid) -> np.ndarray:
        """Stack of mode values on the grid, shape (P, M+1, M+1)."""
        X, Y = grid.mesh()
        return np.stack([mode(a, b, X, Y) for a, b in self.pairs])

    def on_lattice(self, N: int) -> np.ndarray:
        """Stack of mode values at (i/N, j/N), shape (P, 2N-1, 2N-1)."""
        x = np.arange(-N + 1, N) / N
        X, Y = np.meshgrid(x, x, indexing="ij")
        return np.stack([mode(a, b, X, Y) for a, b in self.pairs])

    def sup_norms(self, coeffs, n=401):
        """Sup norms of h and d1 h sampled on a fine grid."""
        x = np.linspace(-1, 1, n)
        X, Y = np.meshgrid(x, x, indexing="ij")
        return (float(np.max(np.abs(self.evaluate(coeffs, X, Y)))),
                float(np.max(np.abs(self.evaluate_d1(coeffs, X, Y)))))

    def bias(self, coeffs, grid: TriangleGrid, eps=None) -> BiasSpec:
        X, Y = grid.mesh()
        return BiasSpec(self.evaluate(coeffs, X, Y), grid, jump=0.0, eps=eps)

    def scale_into_ball(self, coeffs, eps):
        """Rescale ``coeffs`` so that max(|h|_inf, |d1 h|_inf) = eps."""
        s = max(self.sup_norms(coeffs))
        if s == 0:
            return np.asarray(coeffs, dtype=float)
        return np.asarray(coeffs, dtype=float) * (eps / s)

    def random_in_ball(self, eps, rng) -> np.ndarray:
        return self.scale_into_ball(rng.normal(size=self.P), eps)


def single_mode(eps, P=1):
    """Coefficients of eps times the first mode scaled into the eps ball."""
    basis = SineBasis(P)
    c = np.zeros(P)
    c[0] = 1.0
    return basis, basis.scale_into_ball(c, eps)
