"""Lattice parameters, site indexing and the steady profile.

Sites of the lattice {-N+1, ..., N-1} are stored at array offsets
0 ... 2N-2.  Every other module relies on this single convention, so
``offset(i) = i + N - 1`` and ``site(a) = a - N + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Params:
    """Half-width ``N`` and reservoir densities."""

    N: int
    rho_minus: float
    rho_plus: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not 0.0 < self.rho_minus <= self.rho_plus < 1.0:
            raise ValueError(
                "densities must satisfy 0 < rho_minus <= rho_plus < 1, "
                f"got {self.rho_minus!r}, {self.rho_plus!r}")

    @property
    def n_sites(self) -> int:
        return 2 * self.N - 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(-self.N + 1, self.N)

    @property
    def positions(self) -> np.ndarray:
        """Macroscopic positions i/N of the sites."""
        return self.sites / self.N

    @property
    def reversible(self) -> bool:
        return self.rho_minus == self.rho_plus

    def offset(self, i: int) -> int:
        if not -self.N < i < self.N:
            raise IndexError(f"site {i} outside the lattice of half-width {self.N}")
        return i + self.N - 1


def mobility(r):
    """sigma(r) = r(1-r)."""
    return r * (1.0 - r)


@dataclass(frozen=True)
class Profile:
    params: Params
    rho_bar: np.ndarray
    sigma_bar: np.ndarray
    # chemical potential at the 2N-1 sites plus the two reservoirs, so
    # lam[0] is lambda_{-N} and lam[-1] is lambda_{N}
    lam: np.ndarray = field(repr=False)
    rho_prime: float = 0.0

    @property
    def lambda_sites(self) -> np.ndarray:
        return self.lam[1:-1]

    def rho(self, x):
        """Continuum profile at macroscopic positions ``x`` in [-1, 1]."""
        p = self.params
        x = np.asarray(x, dtype=float)
        return 0.5 * (1 - x) * p.rho_minus + 0.5 * (1 + x) * p.rho_plus

    def sigma(self, x):
        return mobility(self.rho(x))

    def sigma_prime(self, x):
        return (1.0 - 2.0 * self.rho(x)) * self.rho_prime


def steady_profile(params: Params) -> Profile:
    """Affine steady density with its mobility and chemical potential."""
    N = params.N
    x = params.positions
    rho = 0.5 * (1 - x) * params.rho_minus + 0.5 * (1 + x) * params.rho_plus
    sigma = mobility(rho)
    dens = np.concatenate(([params.rho_minus], rho, [params.rho_plus]))
    lam = np.log(dens / (1.0 - dens))
    for arr in (rho, sigma, lam):
        arr.setflags(write=False)
    return Profile(params=params, rho_bar=rho, sigma_bar=sigma, lam=lam,
                   rho_prime=0.5 * (params.rho_plus - params.rho_minus))


def centered(eta, profile: Profile, i: int) -> float:
    """eta_i - rho_bar_i for the site ``i`` in {-N+1, ..., N-1}."""
    a = profile.params.offset(i)
    return float(eta[a]) - float(profile.rho_bar[a])


def encode(eta) -> int:
    """Little-endian bit pack: bit ``a`` holds the occupation at offset ``a``."""
    code = 0
    for a, v in enumerate(np.asarray(eta, dtype=np.int64)):
        if v:
            code |= 1 << a
    return code


def decode(code: int, n_sites: int) -> np.ndarray:
    return (code >> np.arange(n_sites)) & 1


def all_configurations(n_sites: int) -> np.ndarray:
    """Occupation table of shape (2**n_sites, n_sites), row = code."""
    codes = np.arange(1 << n_sites, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n_sites)) & 1).astype(np.int8)
