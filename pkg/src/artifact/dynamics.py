"""Open exclusion dynamics: jump rates, kinetic Monte Carlo and exact generators.

Events are numbered 0 ... 2N-1 on the lattice of n = 2N-1 sites: event
``e < n - 1`` swaps the occupations at offsets ``e`` and ``e + 1``, event
``n - 1`` flips the leftmost site through the left reservoir and event
``n`` flips the rightmost one.  Time is macroscopic, so every rate carries
the factor N^2/2 of the generator N^2 L.

A bias h tilts each rate by exp(dPi), where dPi is the change of the
correlation field Pi(h) = (1/4N) sum_{i != j} etabar_i etabar_j h_ij across
the jump.  The simulator keeps the field V_a = sum_j etabar_j h_aj so that
every dPi costs O(1) and a jump costs O(N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .lattice import Params, Profile, all_configurations, decode, encode, steady_profile
from .rng import UniformBuffer, as_generator

MAX_EXACT_N = 7
RESYNC_EVERY = 1 << 16


class SizeError(ValueError):
    """State space too large for exact enumeration."""


# ---------------------------------------------------------------------------
# kernels on the lattice


def lattice_kernel(h, params: Params) -> np.ndarray:
    """h_ij = h(i/N, j/N) on the lattice, symmetrised, with a zero diagonal.

    ``h`` may be None, a callable of (x, y) or an (n, n) array.
    """
    n = params.n_sites
    if h is None:
        return np.zeros((n, n))
    if callable(h):
        x = params.positions
        X, Y = np.meshgrid(x, x, indexing="ij")
        out = np.asarray(h(X, Y), dtype=float) * np.ones((n, n))
    else:
        out = np.array(h, dtype=float)
        if out.shape != (n, n):
            raise ValueError(f"lattice kernel must have shape {(n, n)}, got {out.shape}")
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return out


def pi_value(eta, hlat, profile: Profile) -> float:
    """Pi(h) = (1/4N) sum_{i != j} etabar_i etabar_j h_ij (zero-diagonal h)."""
    eb = np.asarray(eta, dtype=float) - profile.rho_bar
    return float(eb @ hlat @ eb) / (4 * profile.params.N)


# ---------------------------------------------------------------------------
# plain rates


def _n_from_config(eta):
    n = len(eta)
    if n % 2 == 0:
        raise ValueError("configurations have an odd number 2N-1 of sites")
    return (n + 1) // 2


def bulk_rate(eta, i: int) -> float:
    """c(eta, i, i+1) = 1 when the occupations at sites i and i+1 differ."""
    N = _n_from_config(eta)
    if not -N < i < N - 1:
        raise IndexError(f"bond ({i}, {i + 1}) outside the lattice")
    a = i + N - 1
    return float(eta[a + 1] * (1 - eta[a]) + eta[a] * (1 - eta[a + 1]))


def boundary_rate(eta, side, params: Params) -> float:
    """(1 - rho) eta + rho (1 - eta) at the site next to the reservoir ``side``."""
    if side in ("-", -1):
        v, r = eta[0], params.rho_minus
    elif side in ("+", 1):
        v, r = eta[-1], params.rho_plus
    else:
        raise ValueError(f"side must be '-' or '+', got {side!r}")
    return float((1 - r) * v + r * (1 - v))


def swap_event(i: int, params: Params) -> int:
    """Event number of the bond (i, i+1)."""
    if not -params.N < i < params.N - 1:
        raise IndexError(f"bond ({i}, {i + 1}) outside the lattice")
    return i + params.N - 1


def flip_event(side, params: Params) -> int:
    return params.n_sites - 1 if side in ("-", -1) else params.n_sites


def apply_to_config(eta, e: int) -> np.ndarray:
    out = np.array(eta, copy=True)
    n = out.size
    if e < n - 1:
        out[e], out[e + 1] = out[e + 1], out[e]
    elif e == n - 1:
        out[0] = 1 - out[0]
    else:
        out[-1] = 1 - out[-1]
    return out


# ---------------------------------------------------------------------------
# compiled primitives


@numba.njit(cache=True)
def _swap_dpi(a, eta, etabar, V, h, rho_prime, N):
    d = eta[a + 1] - eta[a]
    if d == 0:
        return 0.0
    s = V[a + 1] - V[a] - etabar[a] * h[a + 1, a] + etabar[a + 1] * h[a, a + 1]
    return -d * (0.5 * s + rho_prime * h[a, a + 1] / (2.0 * N)) / N


@numba.njit(cache=True)
def _flip_dpi(a, eta, V, N):
    return (1.0 - 2.0 * eta[a]) * V[a] / (2.0 * N)


@numba.njit(cache=True)
def _plain_rate(e, eta, rho_minus, rho_plus):
    n = eta.size
    if e < n - 1:
        return 1.0 if eta[e] != eta[e + 1] else 0.0
    if e == n - 1:
        return (1.0 - rho_minus) * eta[0] + rho_minus * (1.0 - eta[0])
    return (1.0 - rho_plus) * eta[n - 1] + rho_plus * (1.0 - eta[n - 1])


@numba.njit(cache=True)
def _tree_set(tree, cap, e, val):
    i = cap + e
    tree[i] = val
    i //= 2
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i //= 2


@numba.njit(cache=True)
def _tree_rebuild(tree, cap):
    for i in range(cap - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@numba.njit(cache=True)
def _tree_find(tree, cap, u):
    i = 1
    while i < cap:
        left = tree[2 * i]
        if u < left:
            i = 2 * i
        else:
            u -= left
            i = 2 * i + 1
    return i - cap


def _capacity(n_events):
    cap = 1
    while cap < n_events:
        cap *= 2
    return cap


# ---------------------------------------------------------------------------
# reference rate state (exact rates, incremental bias maintenance)


class RateState:
    """Configuration with its exact biased rates in a prefix-sum tree.

    ``bias_C[i]`` holds C_i = B_i + D_i for the bond at offset i, so that the
    swap exponent is -(eta_{i+1} - eta_i) C_i / N; ``boundary_bias`` holds the
    two flip exponents.
    """

    def __init__(self, eta, profile: Profile, h=None):
        self.profile = profile
        p = profile.params
        self.params = p
        self.N = p.N
        self.h = lattice_kernel(h, p)
        self.has_bias = bool(np.any(self.h != 0))
        self.eta = np.array(eta, dtype=np.int64)
        if self.eta.shape != (p.n_sites,) or np.any((self.eta != 0) & (self.eta != 1)):
            raise ValueError("configuration must be a 0/1 vector over the lattice")
        self.n_events = p.n_sites + 1
        self.cap = _capacity(self.n_events)
        self.tree = np.zeros(2 * self.cap)
        self.events_applied = 0
        self.resync()

    @property
    def config(self):
        return self.eta.copy()

    @property
    def etabar(self):
        return self.eta - self.profile.rho_bar

    def resync(self):
        """Recompute the bias field and every rate from scratch."""
        self._etabar = self.eta - self.profile.rho_bar
        self.V = self.h @ self._etabar
        self._refresh_bias()
        for e in range(self.n_events):
            self.tree[self.cap + e] = self.biased_rate(e)
        _tree_rebuild(self.tree, self.cap)

    def _refresh_bias(self):
        n, N, h, eb = self.params.n_sites, self.N, self.h, self._etabar
        a = np.arange(n - 1)
        s = self.V[a + 1] - self.V[a] - eb[a] * h[a + 1, a] + eb[a + 1] * h[a, a + 1]
        self.bias_C = 0.5 * s + self.profile.rho_prime * h[a, a + 1] / (2.0 * N)
        self.boundary_bias = np.array([_flip_dpi(0, self.eta, self.V, N),
                                       _flip_dpi(n - 1, self.eta, self.V, N)])

    def delta_pi(self, e: int) -> float:
        n = self.params.n_sites
        if e < n - 1:
            return _swap_dpi(e, self.eta, self._etabar, self.V, self.h,
                             self.profile.rho_prime, self.N)
        return _flip_dpi(0 if e == n - 1 else n - 1, self.eta, self.V, self.N)

    def plain_rate(self, e: int) -> float:
        p = self.params
        return 0.5 * self.N ** 2 * _plain_rate(e, self.eta, p.rho_minus, p.rho_plus)

    def biased_rate(self, e: int) -> float:
        c = self.plain_rate(e)
        if c == 0.0 or not self.has_bias:
            return c
        return c * np.exp(self.delta_pi(e))

    @property
    def rates(self):
        return self.tree[self.cap:self.cap + self.n_events].copy()

    @property
    def total_rate(self) -> float:
        return float(self.tree[1])

    def sample_event(self, u: float) -> int:
        e = _tree_find(self.tree, self.cap, u * self.tree[1])
        return min(e, self.n_events - 1)

    def apply_event(self, e: int):
        n = self.params.n_sites
        if self.biased_rate(e) <= 0:
            raise ValueError(f"event {e} has zero rate in the current configuration")
        changed = []
        if e < n - 1:
            d = self.eta[e + 1] - self.eta[e]
            self.eta[e], self.eta[e + 1] = self.eta[e + 1], self.eta[e]
            changed = [(e, d), (e + 1, -d)]
        else:
            a = 0 if e == n - 1 else n - 1
            d = 1 - 2 * self.eta[a]
            self.eta[a] += d
            changed = [(a, d)]
        for a, d in changed:
            self._etabar[a] += d
            if self.has_bias:
                self.V += d * self.h[a]
        self.events_applied += 1
        if self.events_applied % RESYNC_EVERY == 0:
            self.resync()
            return
        if self.has_bias:
            self._refresh_bias()
            touched = range(self.n_events)
        else:
            touched = {max(e - 1, 0), e, min(e + 1, n - 2), n - 1, n}
        for t in touched:
            _tree_set(self.tree, self.cap, t, self.biased_rate(t))

    def recompute_bias(self):
        """From-scratch C_i = B_i + D_i and flip exponents by direct double sums."""
        p, N, h = self.params, self.N, self.h
        n = p.n_sites
        eb = self.eta - self.profile.rho_bar
        C = np.empty(n - 1)
        for a in range(n - 1):
            acc = 0.0
            for j in range(n):
                if j != a and j != a + 1:
                    acc += eb[j] * N * (h[a + 1, j] - h[a, j])
            C[a] = acc / (2 * N) + self.profile.rho_prime * h[a, a + 1] / (2 * N)
        flips = []
        for a in (0, n - 1):
            acc = sum(eb[j] * h[a, j] for j in range(n) if j != a)
            flips.append((1 - 2 * self.eta[a]) * acc / (2 * N))
        return C, np.array(flips)


# ---------------------------------------------------------------------------
# kinetic Monte Carlo


@numba.njit(cache=True)
def _site_change(a, delta, t, eta, etabar, V, h, has_bias, occ, tpos, tracked, pair, snap):
    # occupation integral tau_j(t) = occ[j] + eta[j] * t stays continuous
    tau_a = occ[a] + eta[a] * t
    p = tpos[a]
    nt = tracked.size
    if p >= 0 and delta < 0:
        for q in range(nt):
            j = tracked[q]
            pair[p, q] += occ[j] + eta[j] * t - snap[p, q]
    eta[a] += delta
    etabar[a] += delta
    occ[a] = tau_a - eta[a] * t
    if p >= 0 and delta > 0:
        for q in range(nt):
            j = tracked[q]
            snap[p, q] = occ[j] + eta[j] * t
    if has_bias:
        for j in range(V.size):
            V[j] += delta * h[a, j]


@numba.njit(cache=True)
def _proposal_rate(e, eta, rho_minus, rho_plus, half_n2, logbound):
    c = _plain_rate(e, eta, rho_minus, rho_plus)
    if c == 0.0:
        return 0.0
    return half_n2 * c * np.exp(logbound[e])


@numba.njit(cache=True)
def _flush(t, eta, occ, tracked, pair, snap, out_pair, out_tau, out_eta, s):
    nt = tracked.size
    n = eta.size
    for j in range(n):
        out_tau[s, j] = occ[j] + eta[j] * t
        out_eta[s, j] = eta[j]
    for p in range(nt):
        i = tracked[p]
        for q in range(nt):
            v = pair[p, q]
            if eta[i] == 1:
                j = tracked[q]
                v += occ[j] + eta[j] * t - snap[p, q]
            out_pair[s, p, q] = v


@numba.njit(cache=True)
def _kmc_kernel(eta, etabar, rho_bar, V, h, has_bias, N, rho_minus, rho_plus, rho_prime,
                logbound, tree, cap, occ, tpos, tracked, pair, snap,
                stops, out_pair, out_tau, out_eta, fstate, istate, uniforms,
                log_t, log_e):
    """Advance until all stop times are passed or the uniform block runs out.

    fstate = [t]; istate = [stop index, uniform position, proposals,
    accepted, log length, since resync].  Returns 0 when finished, 1 when
    more uniforms are needed and 2 when the event log is full.
    """
    n = eta.size
    n_events = n + 1
    half_n2 = 0.5 * N * N
    t = fstate[0]
    s = istate[0]
    upos = istate[1]
    nu = uniforms.size
    log_cap = log_t.size
    status = 0
    while s < stops.size:
        if upos + 3 > nu:
            status = 1
            break
        total = tree[1]
        dt = -np.log(uniforms[upos]) / total
        upos += 1
        if t + dt >= stops[s]:
            # memoryless holding time: stop exactly at the checkpoint and redraw
            t = stops[s]
            _flush(t, eta, occ, tracked, pair, snap, out_pair, out_tau, out_eta, s)
            s += 1
            continue
        t += dt
        istate[2] += 1
        e = _tree_find(tree, cap, uniforms[upos] * total)
        upos += 1
        if e >= n_events or tree[cap + e] <= 0.0:
            # rounding at the right edge of the tree; treat as a null proposal
            upos += 1
            continue
        u3 = uniforms[upos]
        upos += 1
        if has_bias:
            if e < n - 1:
                dpi = _swap_dpi(e, eta, etabar, V, h, rho_prime, N)
            elif e == n - 1:
                dpi = _flip_dpi(0, eta, V, N)
            else:
                dpi = _flip_dpi(n - 1, eta, V, N)
            if u3 > np.exp(dpi - logbound[e]):
                continue
        if log_cap > 0:
            if istate[4] >= log_cap:
                status = 2
                t -= dt
                break
            log_t[istate[4]] = t
            log_e[istate[4]] = e
            istate[4] += 1
        istate[3] += 1
        if e < n - 1:
            d = eta[e + 1] - eta[e]
            _site_change(e, d, t, eta, etabar, V, h, has_bias, occ, tpos, tracked, pair, snap)
            _site_change(e + 1, -d, t, eta, etabar, V, h, has_bias, occ, tpos, tracked, pair, snap)
            lo = e - 1 if e > 0 else 0
            hi = e + 1 if e + 1 < n - 1 else n - 2
            for f in range(lo, hi + 1):
                _tree_set(tree, cap, f, _proposal_rate(f, eta, rho_minus, rho_plus, half_n2, logbound))
            if e == 0 or e == n - 2:
                _tree_set(tree, cap, n - 1, _proposal_rate(n - 1, eta, rho_minus, rho_plus, half_n2, logbound))
                _tree_set(tree, cap, n, _proposal_rate(n, eta, rho_minus, rho_plus, half_n2, logbound))
        else:
            a = 0 if e == n - 1 else n - 1
            d = 1 - 2 * eta[a]
            _site_change(a, d, t, eta, etabar, V, h, has_bias, occ, tpos, tracked, pair, snap)
            _tree_set(tree, cap, e, _proposal_rate(e, eta, rho_minus, rho_plus, half_n2, logbound))
            b = 0 if a == 0 else n - 2
            _tree_set(tree, cap, b, _proposal_rate(b, eta, rho_minus, rho_plus, half_n2, logbound))
        istate[5] += 1
        if istate[5] >= 65536:
            istate[5] = 0
            for f in range(n_events):
                tree[cap + f] = _proposal_rate(f, eta, rho_minus, rho_plus, half_n2, logbound)
            _tree_rebuild(tree, cap)
            if has_bias:
                for j in range(n):
                    acc = 0.0
                    for k in range(n):
                        acc += h[j, k] * etabar[k]
                    V[j] = acc
    fstate[0] = t
    istate[0] = s
    istate[1] = upos
    return status


def log_bounds(hlat: np.ndarray, profile: Profile) -> np.ndarray:
    """Per-event upper bounds on |dPi| over all configurations."""
    p = profile.params
    n, N = p.n_sites, p.N
    m = np.maximum(profile.rho_bar, 1 - profile.rho_bar)
    out = np.zeros(n + 1)
    if not np.any(hlat):
        return out
    for a in range(n - 1):
        dh = np.abs(hlat[a + 1] - hlat[a]) * m
        dh[a] = dh[a + 1] = 0.0
        out[a] = (0.5 * dh.sum() + abs(profile.rho_prime * hlat[a, a + 1]) / (2 * N)) / N
    out[n - 1] = (np.abs(hlat[0]) * m).sum() / (2 * N)
    out[n] = (np.abs(hlat[n - 1]) * m).sum() / (2 * N)
    # guard the acceptance ratio against rounding in the compiled exponent
    return out * (1 + 1e-9) + 1e-15


def tracked_sites(params: Params, max_pairs=4096, stride=None) -> np.ndarray:
    """All sites for N <= 64, otherwise a strided sublattice with <= max_pairs pairs."""
    n = params.n_sites
    if stride is None:
        stride = 1
        if params.N > 64:
            while True:
                k = len(range(0, n, stride))
                if k * (k - 1) // 2 <= max_pairs:
                    break
                stride += 1
    return np.arange(0, n, stride, dtype=np.int64)


@dataclass
class Trajectory:
    """Result of a simulation run.

    ``tau[s]`` holds the occupation time of every site and ``pair[s]`` the
    integrals of eta_i eta_j over the tracked sites, both accumulated from
    time 0 up to ``stops[s]``.
    """

    params: Params
    stops: np.ndarray
    tau: np.ndarray
    pair: np.ndarray
    eta_at_stop: np.ndarray
    tracked: np.ndarray
    initial: np.ndarray
    final: np.ndarray
    proposals: int
    accepted: int
    burn_in: float = 0.0
    event_times: np.ndarray | None = None
    events: np.ndarray | None = None
    h: np.ndarray | None = field(default=None, repr=False)

    @property
    def T(self) -> float:
        return float(self.stops[-1])

    def intervals(self):
        """Yield (configuration, holding time) along the logged path."""
        if self.event_times is None:
            raise ValueError("trajectory was run without an event log")
        eta = self.initial.copy()
        t = 0.0
        for te, e in zip(self.event_times, self.events):
            yield eta.copy(), te - t
            eta = apply_to_config(eta, int(e))
            t = te
        yield eta.copy(), self.T - t


def kmc_run(params: Params, h=None, T: float = 1.0, rng=None, *, burn_in: float = 0.0,
            initial=None, checkpoints=(), n_batches: int = 32, observers=(),
            log_events: bool = False, stride=None, max_log: int = 10_000_000,
            block: int = 1 << 18) -> Trajectory:
    """Exact continuous-time simulation of the (biased) open exclusion process.

    Events are proposed from dominating rates c exp(M_e), M_e >= |dPi_e|,
    kept in a prefix-sum tree, and accepted with probability exp(dPi_e - M_e).
    Stop times are the end of burn-in, ``n_batches`` equal batch ends over
    [burn_in, burn_in + T] and any extra ``checkpoints`` (absolute times).
    Observers are called as ``obs(config, holding_time)`` for every interval
    of the path, which requires the event log.
    """
    if not T > 0:
        raise ValueError("simulation time T must be positive")
    if burn_in < 0:
        raise ValueError("burn-in must be nonnegative")
    rng = as_generator(rng)
    profile = steady_profile(params)
    n = params.n_sites
    hlat = lattice_kernel(h, params)
    has_bias = bool(np.any(hlat))
    logbound = log_bounds(hlat, profile)

    if initial is None:
        eta = (rng.random(n) < profile.rho_bar).astype(np.int64)
    else:
        eta = np.array(initial, dtype=np.int64)
    eta0 = eta.copy()
    etabar = eta - profile.rho_bar
    V = hlat @ etabar

    cap = _capacity(n + 1)
    tree = np.zeros(2 * cap)
    half_n2 = 0.5 * params.N ** 2
    for e in range(n + 1):
        tree[cap + e] = _proposal_rate(e, eta, params.rho_minus, params.rho_plus, half_n2, logbound)
    _tree_rebuild(tree, cap)

    stops = {float(burn_in + T * k / n_batches) for k in range(1, n_batches + 1)}
    if burn_in > 0:
        stops.add(float(burn_in))
    stops.update(float(c) for c in checkpoints if 0 < c <= burn_in + T)
    stops = np.array(sorted(stops))

    tracked = tracked_sites(params, stride=stride)
    tpos = -np.ones(n, dtype=np.int64)
    tpos[tracked] = np.arange(tracked.size)
    nt = tracked.size
    occ = np.zeros(n)
    pair = np.zeros((nt, nt))
    snap = np.zeros((nt, nt))
    out_pair = np.zeros((stops.size, nt, nt))
    out_tau = np.zeros((stops.size, n))
    out_eta = np.zeros((stops.size, n), dtype=np.int64)

    want_log = log_events or bool(observers)
    log_t = np.zeros(max_log if want_log else 0)
    log_e = np.zeros(max_log if want_log else 0, dtype=np.int64)

    fstate = np.zeros(1)
    istate = np.zeros(6, dtype=np.int64)
    buf = UniformBuffer(rng, block)
    while True:
        istate[1] = 0
        status = _kmc_kernel(eta, etabar, profile.rho_bar, V, hlat, has_bias, params.N,
                             params.rho_minus, params.rho_plus, profile.rho_prime,
                             logbound, tree, cap, occ, tpos, tracked, pair, snap,
                             stops, out_pair, out_tau, out_eta, fstate, istate,
                             buf.next_block(), log_t, log_e)
        if status == 0:
            break
        if status == 2:
            raise RuntimeError(f"event log capacity {max_log} exceeded; raise max_log")

    n_log = int(istate[4])
    traj = Trajectory(params=params, stops=stops, tau=out_tau, pair=out_pair,
                      eta_at_stop=out_eta, tracked=tracked, initial=eta0, final=eta.copy(),
                      proposals=int(istate[2]), accepted=int(istate[3]), burn_in=float(burn_in),
                      event_times=log_t[:n_log].copy() if want_log else None,
                      events=log_e[:n_log].copy() if want_log else None, h=hlat)
    for obs in observers:
        for config, dt in traj.intervals():
            obs(config, dt)
    return traj


# ---------------------------------------------------------------------------
# exact generators


def _check_exact(params: Params):
    if params.N > MAX_EXACT_N:
        raise SizeError(f"exact enumeration needs N <= {MAX_EXACT_N}, got N = {params.N} "
                        f"({2 ** params.n_sites} states)")


@dataclass
class GeneratorMatrix:
    """Sparse N^2 L_h over configuration codes (little-endian bit packing)."""

    matrix: sp.csr_matrix
    params: Params
    bias_id: str = "zero"

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]


def pi_all(params: Params, hlat: np.ndarray, profile: Profile | None = None) -> np.ndarray:
    """Pi(h) on every configuration, indexed by code."""
    profile = steady_profile(params) if profile is None else profile
    E = all_configurations(params.n_sites) - profile.rho_bar
    return np.einsum("si,ij,sj->s", E, hlat, E) / (4 * params.N)


def transitions(params: Params, h=None):
    """(source code, target code, rate) for every positive-rate transition."""
    _check_exact(params)
    n = params.n_sites
    profile = steady_profile(params)
    hlat = lattice_kernel(h, params)
    configs = all_configurations(n).astype(np.int64)
    codes = np.arange(configs.shape[0], dtype=np.int64)
    pi = pi_all(params, hlat, profile)
    half_n2 = 0.5 * params.N ** 2
    src, dst, rate = [], [], []
    for a in range(n - 1):
        differ = configs[:, a] != configs[:, a + 1]
        new = codes ^ ((1 << a) | (1 << (a + 1)))
        src.append(codes[differ])
        dst.append(new[differ])
        rate.append(np.full(differ.sum(), half_n2))
    for a, r in ((0, params.rho_minus), (n - 1, params.rho_plus)):
        v = configs[:, a]
        src.append(codes)
        dst.append(codes ^ (1 << a))
        rate.append(half_n2 * ((1 - r) * v + r * (1 - v)))
    src, dst, rate = map(np.concatenate, (src, dst, rate))
    rate = rate * np.exp(pi[dst] - pi[src])
    keep = rate > 0
    return src[keep], dst[keep], rate[keep]


def build_generator(params: Params, h=None, bias_id=None) -> GeneratorMatrix:
    src, dst, rate = transitions(params, h)
    S = 1 << params.n_sites
    off = sp.csr_matrix((rate, (src, dst)), shape=(S, S))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    L = (off + sp.diags(diag)).tocsr()
    if bias_id is None:
        bias_id = "zero" if h is None or not np.any(lattice_kernel(h, params)) else "custom"
    return GeneratorMatrix(L, params, bias_id)


@dataclass
class MeasureVector:
    probs: np.ndarray
    params: Params

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (1 << self.params.n_sites,):
            raise ValueError("measure vector has the wrong length")

    def expectation(self, values) -> float:
        return float(np.dot(self.probs, values))

    def marginals(self) -> np.ndarray:
        return self.probs @ all_configurations(self.params.n_sites)


class NumericalError(RuntimeError):
    pass


def invariant_measure(gen: GeneratorMatrix, tol=1e-12) -> MeasureVector:
    """Solve mu^T L = 0 with sum(mu) = 1 by a dense or sparse direct solve."""
    L = gen.matrix
    S = L.shape[0]
    # replace one balance equation by the normalisation
    A = sp.lil_matrix(L.T)
    A[0, :] = np.ones(S)
    b = np.zeros(S)
    b[0] = 1.0
    from scipy.sparse.linalg import spsolve
    mu = spsolve(A.tocsc(), b)
    res = np.max(np.abs(L.T @ mu)) / max(1.0, np.max(np.abs(L.diagonal())))
    if res > tol or np.any(mu < -1e-14):
        raise NumericalError(f"invariant-measure solve inaccurate (scaled residual {res:.2e})")
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    return MeasureVector(mu, gen.params)


def evolve_master(gen: GeneratorMatrix, initial: MeasureVector, t_grid, rtol=1e-10, atol=1e-12,
                  method="DOP853"):
    """Forward equation d mu/dt = L^T mu at the times in ``t_grid``."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    LT = gen.matrix.T.tocsr()
    out = []
    start = 0
    if t_grid[0] == 0.0:
        out.append(MeasureVector(initial.probs.copy(), gen.params))
        start = 1
    if start < t_grid.size:
        sol = solve_ivp(lambda t, y: LT @ y, (0.0, float(t_grid[-1])), initial.probs,
                        method=method, t_eval=t_grid[start:], rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericalError(f"master-equation integration failed: {sol.message}")
        for y in sol.y.T:
            y = np.clip(y, 0.0, None)
            out.append(MeasureVector(y / y.sum(), gen.params))
    return out


# ---------------------------------------------------------------------------
# Radon-Nikodym derivative


def escape_tilt(eta, profile: Profile, hlat) -> float:
    """sum_e (N^2/2) c(eta, e) (exp(dPi_e) - 1) = N^2 e^{-Pi} L e^{Pi} at ``eta``."""
    st = RateState(eta, profile, hlat)
    total = 0.0
    for e in range(st.n_events):
        c = st.plain_rate(e)
        if c:
            total += c * np.expm1(st.delta_pi(e))
    return total


def log_rn_derivative(traj: Trajectory, h) -> float:
    """log dP_h/dP along a logged path: Pi_T - Pi_0 - int N^2 e^{-Pi} L e^{Pi} dt."""
    params = traj.params
    profile = steady_profile(params)
    hlat = lattice_kernel(h, params)
    if not np.any(hlat):
        return 0.0
    integral = 0.0
    last = None
    for config, dt in traj.intervals():
        integral += dt * escape_tilt(config, profile, hlat)
        last = config
    return pi_value(last, hlat, profile) - pi_value(traj.initial, hlat, profile) - integral


__all__ = [
    "RateState", "Trajectory", "GeneratorMatrix", "MeasureVector", "SizeError", "NumericalError",
    "bulk_rate", "boundary_rate", "swap_event", "flip_event", "apply_to_config", "lattice_kernel",
    "pi_value", "pi_all", "kmc_run", "build_generator", "transitions", "invariant_measure",
    "evolve_master", "log_rn_derivative", "escape_tilt", "log_bounds", "tracked_sites",
    "encode", "decode",
]
