"""Photocounting trajectories of the monitored collective emission channel.

Three samplers share one output format:

* ``sse``: pure states at unit efficiency.  Waiting times are exact: the
  unnormalized state evolves under ``H_eff = omega Sx - i (kappa/2) S+S-``
  until its squared norm falls to a uniform random threshold, then ``S-`` is
  applied.
* ``bernoulli``: density matrices on a fixed time step.  Each step uses the
  exact no-click propagator ``exp((L - eta J) dt)``; the no-click probability
  is its trace.  Otherwise the state becomes the at-least-one-click branch
  ``exp(L dt) rho - exp((L - eta J) dt) rho`` (normalized), recorded as one
  click at the step midpoint, so the ensemble average follows the master
  equation exactly on the step grid.
* ``waiting``: density matrices with exact waiting times, integrating the
  no-click equation until its trace reaches the threshold.  Used where dense
  propagators are too large (permutation-invariant runs with local decay).

Every trajectory draws from its own counter-based random stream keyed by
``(seed, index)``, so an ensemble is reproducible regardless of how it is
batched or threaded.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, IntegrationError, StepSizeError
from .generator import DickeSystem, Layout, SectorSystem, observable_matrix
from .spinspace import HalfInt, build_sector_ops

# per-step click probability bound for the Bernoulli scheme
MAX_CLICK_PROBABILITY = 0.05
# fixed batch size: results never depend on --threads
CHUNK = 128
# dense no-click propagators are used for connected blocks up to this size
DENSE_PROPAGATOR_LIMIT = 2500
# eigenvector conditioning beyond which the pure-state sampler uses expm
COND_LIMIT = 1e12
HERMITICITY_CHECK_EVERY = 500


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of master seed ``seed``."""
    if seed < 0 or index < 0:
        raise DomainError("seed and index must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


class UniformStream:
    """Buffered per-trajectory uniforms; each row consumes its own stream in order."""

    def __init__(self, rngs: Sequence, block: int = 1024):
        self.rngs = list(rngs)
        self.block = block
        self.buf = np.empty((len(self.rngs), block))
        self.ptr = np.full(len(self.rngs), block)

    def take(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        for i in rows[self.ptr[rows] >= self.block]:
            self.buf[i] = self.rngs[i].random(self.block)
            self.ptr[i] = 0
        out = self.buf[rows, self.ptr[rows]]
        self.ptr[rows] += 1
        return out


# ---------------------------------------------------------------------------
# records


def params_hash(params: Mapping) -> str:
    payload = json.dumps(params, sort_keys=True, default=float)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class CountRecord:
    """Detector clicks of one trajectory, binned into windows ``(t0, t1]``."""

    jumps: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    seed: int
    index: int = 0
    scheme: str = ""
    params_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.jumps = np.asarray(self.jumps, dtype=float)
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=int)
        if self.jumps.size > 1 and np.any(np.diff(self.jumps) <= 0):
            raise DomainError("jump times must be strictly increasing")
        if self.edges.size and np.any(np.diff(self.edges) <= 0):
            raise DomainError("window edges must be strictly increasing")
        if self.counts.size != max(self.edges.size - 1, 0):
            raise DomainError("one count per window required")
        if self.edges.size and not np.array_equal(self.counts, bin_counts(self.jumps, self.edges)):
            raise DomainError("window counts disagree with jump times")

    @classmethod
    def from_jumps(cls, jumps, edges, **kw) -> "CountRecord":
        jumps = np.asarray(jumps, dtype=float)
        edges = np.asarray(edges, dtype=float)
        return cls(jumps, edges, bin_counts(jumps, edges), **kw)

    @property
    def windows(self) -> list:
        return [(float(a), float(b), int(n)) for a, b, n in zip(self.edges[:-1], self.edges[1:], self.counts)]

    def to_json(self) -> dict:
        out = {
            "seed": int(self.seed),
            "index": int(self.index),
            "scheme": self.scheme,
            "params_hash": self.params_hash,
            "jumps": [float(t) for t in self.jumps],
            "windows": [{"t0": a, "t1": b, "dN": n} for a, b, n in self.windows],
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_json(cls, payload: Mapping) -> "CountRecord":
        wins = payload.get("windows", [])
        edges = [w["t0"] for w in wins[:1]] + [w["t1"] for w in wins]
        for a, b in zip(wins[:-1], wins[1:]):
            if a["t1"] != b["t0"]:
                raise DomainError("windows must be contiguous")
        return cls(
            jumps=payload.get("jumps", []),
            edges=edges,
            counts=[w["dN"] for w in wins],
            seed=payload["seed"],
            index=payload.get("index", 0),
            scheme=payload.get("scheme", ""),
            params_hash=payload.get("params_hash", ""),
            meta=dict(payload.get("meta", {})),
        )


def bin_counts(jumps, edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=float)
    if edges.size < 2:
        return np.zeros(0, dtype=int)
    k = np.searchsorted(edges, np.asarray(jumps, dtype=float), side="left") - 1
    k = k[(k >= 0) & (k < edges.size - 1)]
    return np.bincount(k, minlength=edges.size - 1).astype(int)


def write_records(path, records: Sequence[CountRecord]) -> None:
    """One JSON object per line, ordered by trajectory index."""
    with open(path, "w") as fh:
        for rec in sorted(records, key=lambda r: r.index):
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def read_records(path) -> list:
    with open(path) as fh:
        return [CountRecord.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class SectorWeights:
    """Populations ``P_S(t)`` keyed by ``2S``."""

    times: np.ndarray
    weights: dict
    exhaustive: bool = True

    def at(self, t: float) -> dict:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"no sample at t={t}")
        return {s: float(w[k]) for s, w in self.weights.items()}

    def max_weight(self) -> np.ndarray:
        return np.max(np.array(list(self.weights.values())), axis=0)


@dataclass
class TrajectoryResult:
    record: CountRecord
    times: np.ndarray
    observables: dict
    weights: SectorWeights
    final_state: np.ndarray | None = None
    stopped_at: float | None = None


@dataclass
class FreezingStats:
    mean: dict
    std: dict
    n: int


def freezing_stats(ensemble: Sequence[SectorWeights], t_star: float) -> FreezingStats:
    """Ensemble mean and standard deviation of each sector weight at ``t_star``."""
    if len(ensemble) == 0:
        raise DomainError("empty ensemble")
    snaps = [w.at(t_star) for w in ensemble]
    keys = set(snaps[0])
    if any(set(s) != keys for s in snaps):
        raise DomainError("trajectories track different sectors")
    mean = {k: float(np.mean([s[k] for s in snaps])) for k in sorted(keys)}
    std = {k: float(np.std([s[k] for s in snaps])) for k in sorted(keys)}
    return FreezingStats(mean, std, len(snaps))


# ---------------------------------------------------------------------------
# piecewise-constant drive and the time grid shared by all samplers


@dataclass(frozen=True)
class Drive:
    """Rabi frequency ``omegas[k]`` on ``(edges[k], edges[k+1]]``."""

    edges: tuple
    omegas: tuple

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        w = tuple(float(x) for x in self.omegas)
        if len(e) != len(w) + 1 or len(w) == 0:
            raise DomainError("need one omega per drive segment")
        if any(b <= a for a, b in zip(e[:-1], e[1:])):
            raise DomainError("drive edges must be increasing")
        if any(x < 0 or not np.isfinite(x) for x in w):
            raise DomainError("omega must be finite and non-negative")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "omegas", w)

    @classmethod
    def constant(cls, omega: float, T: float, t0: float = 0.0) -> "Drive":
        return cls((t0, t0 + T), (omega,))

    @property
    def t0(self) -> float:
        return self.edges[0]

    @property
    def T(self) -> float:
        return self.edges[-1]

    def omega_at(self, t: float) -> float:
        k = int(np.clip(np.searchsorted(self.edges, t, side="left") - 1, 0, len(self.omegas) - 1))
        return self.omegas[k]


@dataclass
class _Plan:
    """Intervals between all breakpoints, with what to do at their right ends."""

    starts: np.ndarray
    ends: np.ndarray
    omegas: np.ndarray
    sample_at_end: np.ndarray
    window_end: np.ndarray
    sample_times: np.ndarray
    edges: np.ndarray
    sample_start: bool


def _plan(drive: Drive, sample_times, window_edges) -> _Plan:
    t0, T = drive.t0, drive.T
    samples = np.unique(np.asarray([] if sample_times is None else sample_times, dtype=float))
    edges = np.unique(np.asarray(drive.edges if window_edges is None else window_edges, dtype=float))
    if samples.size and (samples[0] < t0 - 1e-12 or samples[-1] > T + 1e-12):
        raise DomainError("sample times outside the drive")
    if edges.size and (edges[0] < t0 - 1e-12 or edges[-1] > T + 1e-12):
        raise DomainError("window edges outside the drive")
    pts = np.unique(np.concatenate([drive.edges, samples, edges]))
    # merge points closer than rounding
    keep = np.concatenate([[True], np.diff(pts) > 1e-12 * max(1.0, T)])
    pts = pts[keep]
    starts, ends = pts[:-1], pts[1:]
    mids = 0.5 * (starts + ends)
    omegas = np.array([drive.omega_at(m) for m in mids])

    def flags(values):
        return np.array([np.any(np.abs(values - e) <= 1e-12 * max(1.0, T)) for e in ends], dtype=bool)

    sample_start = bool(samples.size and abs(samples[0] - t0) <= 1e-12 * max(1.0, T))
    return _Plan(starts, ends, omegas, flags(samples), flags(edges[1:]) if edges.size else np.zeros(ends.size, bool),
                 samples, edges, sample_start)


def _collect(plan: _Plan, names, seeds, indices, scheme, phash, meta, jumps, obs_rows, weight_rows, finals, stop_times):
    out = []
    for b in range(len(seeds)):
        stop = stop_times[b]
        edges = plan.edges if stop is None else plan.edges[plan.edges <= stop + 1e-12]
        rec = CountRecord.from_jumps(jumps[b], edges, seed=seeds[b], index=indices[b], scheme=scheme,
                                     params_hash=phash, meta=meta)
        k = len(obs_rows[b])
        rows = np.array(obs_rows[b]).reshape(k, len(names))
        obs = {name: rows[:, j] for j, name in enumerate(names)}
        wkeys = list(weight_rows[b][0]) if k else []
        weights = SectorWeights(plan.sample_times[:k], {s: np.array([w[s] for w in weight_rows[b]]) for s in wkeys})
        out.append(TrajectoryResult(rec, plan.sample_times[:k], obs, weights, finals[b], stop))
    return out


# ---------------------------------------------------------------------------
# pure states


class _PureModel:
    """Block-diagonal sector operators for pure states ``psi = (+)_S psi_S``."""

    def __init__(self, system: SectorSystem):
        self.system = system
        self.kappa = system.kappa
        self.twos = [s.twice_value for s in system.sectors]
        dims = [t + 1 for t in self.twos]
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.n = int(self.offsets[-1])
        ops = [build_sector_ops(HalfInt(t)) for t in self.twos]

        def diag(name):
            return sla.block_diag(*[o.dense(name) for o in ops])

        self.sx = diag("s_x")
        self.sy = diag("s_y")
        self.sz = diag("s_z")
        self.spsm = diag("s_plus_s_minus")
        self.sm = diag("s_minus")
        self._segments = {}

    def operator(self, name):
        return {"sx": self.sx, "sy": self.sy, "sz": self.sz, "spsm": self.spsm, "splus_sminus": self.spsm}[name]

    def segment(self, omega: float) -> "_PureSegment":
        if omega not in self._segments:
            H = omega * self.sx - 0.5j * self.kappa * self.spsm
            self._segments[omega] = _PureSegment(H, np.sqrt(self.kappa) * self.sm)
        return self._segments[omega]

    def weights(self, Psi) -> dict:
        return {t: np.sum(np.abs(Psi[:, self.offsets[k]:self.offsets[k + 1]]) ** 2, axis=1)
                for k, t in enumerate(self.twos)}

    def vector(self, amplitudes) -> np.ndarray:
        if isinstance(amplitudes, Mapping):
            psi = np.zeros(self.n, dtype=complex)
            for S, a in amplitudes.items():
                t = HalfInt.of(S).twice_value
                k = self.twos.index(t)
                psi[self.offsets[k]:self.offsets[k + 1]] = a
        else:
            psi = np.asarray(amplitudes, dtype=complex)
        if psi.shape != (self.n,):
            raise DomainError(f"pure state must have length {self.n}")
        nrm = np.linalg.norm(psi)
        if not abs(nrm - 1) < 1e-10:
            raise DomainError("pure state must be normalized")
        return psi


class _PureSegment:
    """Propagation under a fixed ``H_eff`` in its eigenbasis (or by expm if ill-conditioned).

    Norms and click rates are evaluated on the state itself rather than via
    the Gram matrix of the eigenbasis, whose conditioning is the square of
    that of the eigenvectors, and every click re-expands the state.
    """

    def __init__(self, H, jump):
        self.H = H
        self.jump_op = jump
        lam, V = np.linalg.eig(H)
        self.cond = float(np.linalg.cond(V))
        self.eigen = self.cond <= COND_LIMIT
        if self.eigen:
            self.lam = lam
            self.V = V
            self.Vi = np.linalg.inv(V)
            self.JV = jump @ V
        else:
            n = H.shape[0]
            self.V = self.Vi = np.eye(n)
            self.JV = jump

    def to_coeffs(self, Psi):
        return Psi @ self.Vi.T

    def from_coeffs(self, C):
        return C @ self.V.T

    def advance(self, C, tau):
        tau = np.asarray(tau, dtype=float)
        if self.eigen:
            return C * np.exp(-1j * np.outer(tau, self.lam))
        return np.array([sla.expm(-1j * self.H * t) @ c for c, t in zip(C, tau)])

    def norm2(self, X):
        P = self.from_coeffs(X)
        return np.einsum("ij,ij->i", P.conj(), P).real

    def norm2_and_rate(self, X):
        # d|psi|^2/dt = -|J psi|^2 for H_eff = H - (i/2) J^dag J
        JX = X @ self.JV.T
        return self.norm2(X), -np.einsum("ij,ij->i", JX.conj(), JX).real

    def jump(self, X):
        """Clicked states, normalized, as coefficients, with the pre-normalization norms."""
        Y = X @ self.JV.T
        nrm = np.einsum("ij,ij->i", Y.conj(), Y).real
        with np.errstate(divide="ignore", invalid="ignore"):
            Y = Y / np.sqrt(nrm)[:, None]
            C = self.to_coeffs(Y)
            # re-expansion leaves |norm - 1| ~ cond(V) eps; a draw with -log r
            # below that offset would otherwise click again at tau = 0
            C = C / np.sqrt(self.norm2(C))[:, None]
        return C, nrm


def _solve_waiting(seg: _PureSegment, C, tau_hi, logr):
    """Vectorized safeguarded Newton for ``log|psi(tau)|^2 = log r`` on ``(0, tau_hi)``."""
    m = C.shape[0]
    lo = np.zeros(m)
    hi = tau_hi.copy()
    _, dn0 = seg.norm2_and_rate(C)
    rate0 = np.maximum(-dn0, 1e-300)
    tau = np.clip(-logr / rate0, 0.0, hi)
    tau = np.where((tau <= lo) | (tau >= hi), 0.5 * (lo + hi), tau)
    todo = np.arange(m)
    for _ in range(200):
        X = seg.advance(C[todo], tau[todo])
        n, dn = seg.norm2_and_rate(X)
        f = np.log(np.maximum(n, 1e-300)) - logr[todo]
        fp = dn / np.maximum(n, 1e-300)
        pos = f > 0
        lo[todo] = np.where(pos, tau[todo], lo[todo])
        hi[todo] = np.where(pos, hi[todo], tau[todo])
        width = hi[todo] - lo[todo]
        done = (np.abs(f) < 1e-12) | (width <= 1e-15 * (1.0 + tau[todo]))
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = tau[todo] - f / fp
        bad = ~np.isfinite(newton) | (newton <= lo[todo]) | (newton >= hi[todo])
        newton = np.where(bad, 0.5 * (lo[todo] + hi[todo]), newton)
        tau[todo] = np.where(done, tau[todo], newton)
        todo = todo[~done]
        if todo.size == 0:
            return tau
    raise IntegrationError("waiting-time root search did not converge")


def _run_sse_batch(model: _PureModel, psi0s, plan: _Plan, rngs, observables, stop_rule, keep_final):
    B = len(rngs)
    stream = UniformStream(rngs)
    Psi = np.array(psi0s, dtype=complex)
    logr = np.log(stream.take(np.arange(B)))
    jumps = [[] for _ in range(B)]
    obs_ops = [model.operator(n) for n in observables]
    obs_rows = [[] for _ in range(B)]
    weight_rows = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    stop_times = [None] * B
    counts = [[] for _ in range(B)]
    n_window = 0

    def sample(rows):
        P = Psi[rows]
        vals = [np.einsum("ij,ij->i", P.conj(), P @ O.T).real for O in obs_ops]
        wts = model.weights(P)
        for k, b in enumerate(rows):
            obs_rows[b].append([v[k] for v in vals])
            weight_rows[b].append({t: float(w[k]) for t, w in wts.items()})

    if plan.sample_start:
        sample(np.arange(B))
    for a, bnd, omega, do_sample, win_end in zip(plan.starts, plan.ends, plan.omegas, plan.sample_at_end, plan.window_end):
        rows = np.nonzero(alive)[0]
        if rows.size:
            seg = model.segment(float(omega))
            C = seg.to_coeffs(Psi[rows])
            tref = np.full(rows.size, a)
            active = np.arange(rows.size)
            while active.size:
                tau_end = bnd - tref[active]
                X = seg.advance(C[active], tau_end)
                q = seg.norm2(X)
                fin = q > np.exp(logr[rows[active]])
                f_idx = active[fin]
                if f_idx.size:
                    C[f_idx] = X[fin] / np.sqrt(q[fin])[:, None]
                    logr[rows[f_idx]] -= np.log(q[fin])
                    tref[f_idx] = bnd
                c_idx = active[~fin]
                if c_idx.size:
                    tau = _solve_waiting(seg, C[c_idx], tau_end[~fin], logr[rows[c_idx]])
                    Y, nrm = seg.jump(seg.advance(C[c_idx], tau))
                    if np.any(nrm <= 0):
                        raise IntegrationError("click from a dark state", time=float(tref[c_idx][0]))
                    C[c_idx] = Y
                    tref[c_idx] += tau
                    for i in c_idx:
                        rec = jumps[rows[i]]
                        # a waiting time below the float spacing of t keeps records increasing
                        if rec and tref[i] <= rec[-1]:
                            tref[i] = np.nextafter(rec[-1], np.inf)
                        rec.append(tref[i])
                    logr[rows[c_idx]] = np.log(stream.take(rows[c_idx]))
                active = c_idx
            Psi[rows] = seg.from_coeffs(C)
            # keep the stored vector normalized against drift from the basis change
            Psi[rows] /= np.linalg.norm(Psi[rows], axis=1)[:, None]
        if do_sample:
            sample(rows)
        if win_end:
            n_window += 1
            if stop_rule is not None:
                for b in rows:
                    counts[b] = bin_counts(jumps[b], plan.edges[: n_window + 1])
                    if stop_rule(counts[b]):
                        alive[b] = False
                        stop_times[b] = float(bnd)
    finals = [Psi[b].copy() if keep_final else None for b in range(B)]
    return jumps, obs_rows, weight_rows, finals, stop_times


# ---------------------------------------------------------------------------
# density matrices


class _MatrixModel:
    """No-click and full one-step propagators on the connected block groups of a layout."""

    def __init__(self, system, eta: float):
        if not 0.0 <= eta <= 1.0:
            raise DomainError(f"efficiency must lie in [0, 1], got {eta}")
        self.system = system
        self.eta = eta
        self.layout: Layout = system.layout
        self.J = system.jump.matrix.tocsr()
        probe = system.liouvillian(1.0).matrix
        nb = len(self.layout.blocks)
        owner = np.repeat(np.arange(nb), np.diff(self.layout.offsets))
        coo = (abs(probe) + abs(self.J)).tocoo()
        adj = sp.coo_matrix((np.ones(coo.nnz), (owner[coo.row], owner[coo.col])), shape=(nb, nb))
        _, labels = connected_components(adj, directed=False)
        self.groups = []
        for lab in np.unique(labels):
            blocks = np.nonzero(labels == lab)[0]
            idx = np.concatenate([np.arange(self.layout.offsets[k], self.layout.offsets[k + 1]) for k in blocks])
            self.groups.append(idx)
        self.trace = self.layout.trace_functional
        self.jump_trace = np.asarray(self.J.T @ self.trace).ravel()  # v -> Tr[J v]
        self._gens = {}
        self._props = {}

    def generator(self, omega, full=False):
        """``L`` if ``full`` else the no-click part ``L - eta J``."""
        if (omega, full) not in self._gens:
            L = self.system.liouvillian(omega).matrix
            self._gens[(omega, full)] = (L if full else L - self.eta * self.J).tocsr()
        return self._gens[(omega, full)]

    def no_click(self, omega):
        return self.generator(omega)

    def propagators(self, omega, h, group, full=False):
        """Dense ``exp(A h)`` restricted to a group, or ``None`` for the sparse path."""
        idx = self.groups[group]
        if idx.size > DENSE_PROPAGATOR_LIMIT:
            return None
        key = (omega, round(h, 15), group, full)
        if key not in self._props:
            A = self.generator(omega, full)[idx][:, idx].toarray()
            self._props[key] = sla.expm(A * h)
        return self._props[key]

    def max_rate_bound(self) -> float:
        return self.eta * self.system.kappa * self.system.max_jump_factor()


def _rk4(A, X, h):
    """Fixed-step RK4 for ``dX/dt = A X`` with enough substeps for stability and accuracy."""
    norm = float(abs(A).sum(axis=1).max()) if A.nnz else 0.0
    n = max(1, int(np.ceil(norm * h / 0.2)))
    dt = h / n
    for _ in range(n):
        k1 = A @ X
        k2 = A @ (X + 0.5 * dt * k1)
        k3 = A @ (X + 0.5 * dt * k2)
        k4 = A @ (X + dt * k3)
        X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def _propagate(model: _MatrixModel, omega, h, X, groups, full=False):
    out = np.zeros_like(X)
    for g in groups:
        idx = model.groups[g]
        P = model.propagators(omega, h, g, full)
        if P is not None:
            out[idx] = P @ X[idx]
        else:
            A = model.generator(omega, full)[idx][:, idx]
            out[idx] = _rk4(A, X[idx], h)
    return out


def _matrix_sampler(X, rows, obs_F, obs_rows, weight_rows, wfun):
    """Record observables of columns ``X`` for trajectories ``rows``."""
    vals = (obs_F @ X).real
    wts = {t: (f @ X).real for t, f in wfun.items()}
    for k, b in enumerate(rows):
        obs_rows[b].append(list(vals[:, k]))
        weight_rows[b].append({t: float(w[k]) for t, w in wts.items()})


def _run_bernoulli_batch(model: _MatrixModel, rho0s, plan: _Plan, rngs, observables, stop_rule, keep_final, dt):
    B = len(rngs)
    stream = UniformStream(rngs)
    X = np.array(rho0s, dtype=complex).T.copy()  # columns are trajectories
    layout = model.layout
    active_groups = [g for g, idx in enumerate(model.groups) if np.any(X[idx] != 0)]
    obs_F = observable_matrix(layout, observables) if observables else np.zeros((0, layout.size))
    wfun = layout.sector_weight_functionals()
    jumps = [[] for _ in range(B)]
    obs_rows = [[] for _ in range(B)]
    weight_rows = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    stop_times = [None] * B
    n_window = 0
    bound = model.max_rate_bound()
    dt_target = dt if dt is not None else (MAX_CLICK_PROBABILITY / bound if bound > 0 else np.inf)
    step_count = 0

    if plan.sample_start:
        _matrix_sampler(X, np.arange(B), obs_F, obs_rows, weight_rows, wfun)
    for a, bnd, omega, do_sample, win_end in zip(plan.starts, plan.ends, plan.omegas, plan.sample_at_end, plan.window_end):
        rows = np.nonzero(alive)[0]
        length = bnd - a
        nsteps = max(1, int(np.ceil(length / dt_target - 1e-9)))
        h = length / nsteps
        for k in range(nsteps):
            if rows.size == 0:
                break
            t = a + k * h
            Xr = X[:, rows]
            rate = model.eta * (model.jump_trace @ Xr).real
            worst = int(np.argmax(rate))
            if rate[worst] * h > MAX_CLICK_PROBABILITY * (1 + 1e-9):
                raise StepSizeError(
                    f"dt={h:.3e} too large for click rate {rate[worst]:.3e} (limit {MAX_CLICK_PROBABILITY})",
                    time=float(t), rate=float(rate[worst]), dt=float(h))
            W = _propagate(model, omega, h, Xr, active_groups)
            p_no = (model.trace @ W).real
            if np.any(p_no < -1e-12) or np.any(p_no > 1 + 1e-6):
                raise IntegrationError("no-click probability left [0, 1]", time=float(t))
            u = stream.take(rows)
            click = u >= p_no
            if np.any(~click):
                X[:, rows[~click]] = W[:, ~click] / p_no[~click]
            if np.any(click):
                # the at-least-one-click branch of the exact one-step map keeps
                # the ensemble average equal to exp(L h) rho
                Y = _propagate(model, omega, h, Xr[:, click], active_groups, full=True) - W[:, click]
                tr = (model.trace @ Y).real
                if np.any(tr <= 0):
                    raise IntegrationError("click from a dark state", time=float(t))
                X[:, rows[click]] = Y / tr
                for b in rows[click]:
                    jumps[b].append(t + h / 2)
            step_count += 1
            if step_count % HERMITICITY_CHECK_EVERY == 0:
                err = max(layout.hermiticity_error(X[:, b]) for b in rows)
                if err > 1e-6:
                    raise IntegrationError(f"Hermiticity drift {err:.2e}", time=float(t + h))
        if do_sample:
            _matrix_sampler(X[:, rows], rows, obs_F, obs_rows, weight_rows, wfun)
        if win_end:
            n_window += 1
            if stop_rule is not None:
                for b in rows:
                    if stop_rule(bin_counts(jumps[b], plan.edges[: n_window + 1])):
                        alive[b] = False
                        stop_times[b] = float(bnd)
    finals = [X[:, b].copy() if keep_final else None for b in range(B)]
    return jumps, obs_rows, weight_rows, finals, stop_times


def _run_waiting_batch(model: _MatrixModel, rho0s, plan: _Plan, rngs, observables, stop_rule, keep_final,
                       rtol=1e-10, atol=1e-12):
    B = len(rngs)
    layout = model.layout
    obs_F = observable_matrix(layout, observables) if observables else np.zeros((0, layout.size))
    wfun = layout.sector_weight_functionals()
    out_jumps, obs_rows, weight_rows, finals, stop_times = [], [[] for _ in range(B)], [[] for _ in range(B)], [], []
    trace = model.trace
    for b in range(B):
        rng = rngs[b]
        stream = UniformStream([rng])
        x = np.array(rho0s[b], dtype=complex)
        r = stream.take([0])[0]
        jumps = []
        stop = None
        n_window = 0
        if plan.sample_start:
            _matrix_sampler(x[:, None], [b], obs_F, obs_rows, weight_rows, wfun)
        for a, bnd, omega, do_sample, win_end in zip(plan.starts, plan.ends, plan.omegas, plan.sample_at_end, plan.window_end):
            A = model.no_click(float(omega))
            t = a
            while t < bnd:
                def event(_t, y, r=r):
                    return (trace @ y).real - r
                event.terminal = True
                event.direction = -1
                sol = solve_ivp(lambda _t, y: A @ y, (t, bnd), x, method="DOP853", rtol=rtol, atol=atol,
                                events=event)
                if sol.status == -1:
                    raise IntegrationError(f"integrator stopped: {sol.message}", time=float(sol.t[-1]))
                if sol.status == 1 and sol.t_events[0].size:
                    tc = float(sol.t_events[0][0])
                    y = model.J @ sol.y_events[0][0]
                    tr = (trace @ y).real
                    if tr <= 0:
                        raise IntegrationError("click from a dark state", time=tc)
                    x = y / tr
                    jumps.append(tc)
                    r = stream.take([0])[0]
                    t = tc
                else:
                    y = sol.y[:, -1]
                    q = (trace @ y).real
                    x = y / q
                    r = r / q
                    t = bnd
            if do_sample:
                _matrix_sampler(x[:, None], [b], obs_F, obs_rows, weight_rows, wfun)
            if win_end:
                n_window += 1
                if stop_rule is not None and stop_rule(bin_counts(jumps, plan.edges[: n_window + 1])):
                    stop = float(bnd)
                    break
        if layout.hermiticity_error(x) > 1e-6:
            raise IntegrationError("Hermiticity drift", time=float(plan.ends[-1]))
        out_jumps.append(jumps)
        finals.append(x if keep_final else None)
        stop_times.append(stop)
    return out_jumps, obs_rows, weight_rows, finals, stop_times


# ---------------------------------------------------------------------------
# public entry points


def _initial(initial, rng, n):
    v = initial(rng) if callable(initial) else initial
    v = np.asarray(v, dtype=complex)
    if v.shape != (n,):
        raise DomainError(f"initial state must have length {n}, got {v.shape}")
    return v


def _params(system, eta, drive, scheme, dt, extra=None):
    out = {
        "system": system.describe(),
        "eta": float(eta),
        "drive": {"edges": list(drive.edges), "omegas": list(drive.omegas)},
        "scheme": scheme,
        "dt": None if dt is None else float(dt),
    }
    if extra:
        out.update(extra)
    return out


def run_ensemble(
    system,
    initial,
    drive: Drive,
    seed: int,
    indices: Sequence[int],
    eta: float = 1.0,
    scheme: str = "auto",
    dt: float | None = None,
    sample_times: Sequence | None = None,
    window_edges: Sequence | None = None,
    observables: Sequence = ("sx", "sy", "sz", "spsm"),
    stop_rule: Callable | None = None,
    keep_final: bool = False,
    threads: int = 1,
) -> list:
    """Simulate trajectories ``indices`` of master seed ``seed``.

    ``initial`` is a state (pure vector for ``sse``, layout vector otherwise)
    or a callable ``rng -> state`` drawing from the trajectory's own stream.
    ``stop_rule(counts_so_far) -> bool`` is consulted at each window end and
    freezes a trajectory once it returns true.
    """
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"efficiency must lie in [0, 1], got {eta}")
    if scheme == "auto":
        scheme = default_scheme(system, eta, initial)
    plan = _plan(drive, sample_times, window_edges)
    indices = [int(i) for i in indices]
    params = _params(system, eta, drive, scheme, dt)
    phash = params_hash(params)
    meta = {"eta": float(eta), "kappa": float(system.kappa)}
    observables = tuple(observables)

    if scheme == "sse":
        if eta != 1.0:
            raise DomainError("the pure-state sampler requires unit efficiency")
        if not isinstance(system, SectorSystem):
            raise DomainError("the pure-state sampler needs a fixed-sector system")
        model = _PureModel(system)
        worker = lambda psi, rngs: _run_sse_batch(model, psi, plan, rngs, observables, stop_rule, keep_final)  # noqa: E731
    elif scheme in ("bernoulli", "waiting"):
        model = _MatrixModel(system, eta)
        n = model.layout.size
        if scheme == "bernoulli":
            worker = lambda rho, rngs: _run_bernoulli_batch(model, rho, plan, rngs, observables, stop_rule, keep_final, dt)  # noqa: E731
        else:
            worker = lambda rho, rngs: _run_waiting_batch(model, rho, plan, rngs, observables, stop_rule, keep_final)  # noqa: E731
    else:
        raise DomainError(f"unknown scheme {scheme!r}")

    chunks = [indices[i:i + CHUNK] for i in range(0, len(indices), CHUNK)]

    def job(chunk):
        rngs = [trajectory_rng(seed, i) for i in chunk]
        states = []
        for rng in rngs:
            raw = initial(rng) if callable(initial) else initial
            if scheme == "sse":
                states.append(model.vector(raw))
            else:
                states.append(_initial(raw, rng, n))
        jumps, obs_rows, weight_rows, finals, stops = worker(states, rngs)
        return _collect(plan, observables, [seed] * len(chunk), chunk, scheme, phash, meta, jumps, obs_rows,
                        weight_rows, finals, stops)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    return [r for part in parts for r in part]


def default_scheme(system, eta, initial=None) -> str:
    if eta == 1.0 and isinstance(system, SectorSystem) and (callable(initial) or _looks_pure(system, initial)):
        return "sse"
    if isinstance(system, DickeSystem) and system.layout.size > DENSE_PROPAGATOR_LIMIT:
        return "waiting"
    return "bernoulli"


def _looks_pure(system, initial) -> bool:
    if isinstance(initial, Mapping):
        return True
    n_pure = sum(s.twice_value + 1 for s in system.sectors)
    return initial is not None and np.asarray(initial).shape == (n_pure,) and n_pure != system.layout.size


def run_sme(system, rho0, eta, drive: Drive, seed: int, index: int = 0, dt=None, scheme="bernoulli", **kw):
    """One conditioned density-matrix trajectory."""
    if scheme not in ("bernoulli", "waiting"):
        raise DomainError("run_sme uses the bernoulli or waiting scheme")
    return run_ensemble(system, rho0, drive, seed, [index], eta=eta, scheme=scheme, dt=dt, **kw)[0]


def run_sse(system, psi0, drive: Drive, seed: int, index: int = 0, **kw):
    """One pure-state trajectory at unit efficiency."""
    return run_ensemble(system, psi0, drive, seed, [index], eta=1.0, scheme="sse", **kw)[0]


def run_pi_sme(system: DickeSystem, rho0, eta, drive: Drive, seed: int, index: int = 0, dt=None,
               scheme: str | None = None, **kw):
    """One trajectory of the permutation-invariant model with unmonitored local decay."""
    if not isinstance(system, DickeSystem):
        raise DomainError("run_pi_sme needs a DickeSystem")
    scheme = scheme or default_scheme(system, eta)
    return run_ensemble(system, rho0, drive, seed, [index], eta=eta, scheme=scheme, dt=dt, **kw)[0]


def stationary_pure_sampler(system: SectorSystem, omega: float):
    """Draw pure states whose ensemble average is the stationary state at ``omega``.

    The stationary density matrix is diagonalized and an eigenvector is picked
    with its eigenvalue as probability.
    """
    from .dynamics import stationary_state

    if len(system.sectors) != 1:
        raise DomainError("stationary sampling is defined for a single sector")
    L = system.liouvillian(omega)
    rho = L.layout.unvec(stationary_state(L).rho)[(system.sectors[0].twice_value,) * 2]
    p, U = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    p = np.clip(p, 0, None)
    p /= p.sum()
    cdf = np.cumsum(p)

    def draw(rng):
        k = min(int(np.searchsorted(cdf, rng.random(), side="right")), p.size - 1)
        return U[:, k].copy()

    return draw


def ensemble_mean(results: Sequence[TrajectoryResult], name: str) -> tuple:
    """Sample mean and standard error of an observable across trajectories (NaN error for one)."""
    data = np.array([r.observables[name] for r in results])
    if len(results) < 2:
        return data.mean(axis=0), np.full(data.shape[1:], np.nan)
    return data.mean(axis=0), data.std(axis=0, ddof=1) / np.sqrt(len(results))
