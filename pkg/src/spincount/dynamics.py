"""Deterministic evolution, stationary states, spectra and counting statistics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp
from scipy.sparse.csgraph import connected_components

from .errors import AmbiguityError, DomainError, EigensolverError, EstimatorInputError, IntegrationError
from .generator import LINDBLAD, PI_LOCAL, TILTED, Layout, Superoperator, observable_matrix, tilt

# full dense eigendecomposition is used up to this vector length
DENSE_LIMIT = 2000
# dominant eigenvalue only: Arnoldi wins well before the full-spectrum limit
DOMINANT_DENSE_LIMIT = 400
CSV_VERSION = 1

RTOL = 1e-9
ATOL = 1e-11
DRIFT_TOL = 1e-8


# ---------------------------------------------------------------------------
# state checks


def block_matrices(layout: Layout, v: np.ndarray) -> list:
    """Density-matrix pieces whose positivity defines positivity of the state.

    Sector layouts with coherence blocks are assembled into one matrix; Dicke
    layouts are block diagonal and checked block by block.
    """
    blocks = layout.unvec(v)
    diag = layout.diagonal_sectors
    if len(diag) == len(layout.blocks):
        return [blocks[(a, a)] for a in diag]
    sizes = [a + 1 for a in diag]
    off = np.concatenate([[0], np.cumsum(sizes)])
    full = np.zeros((off[-1], off[-1]), dtype=complex)
    for x, a in enumerate(diag):
        for y, b in enumerate(diag):
            if (a, b) in blocks:
                full[off[x] : off[x + 1], off[y] : off[y + 1]] = blocks[(a, b)]
    return [full]


def min_eigenvalue(layout: Layout, v: np.ndarray) -> float:
    vals = [np.linalg.eigvalsh((m + m.conj().T) / 2).min() for m in block_matrices(layout, v)]
    return float(min(vals))


def purity(layout: Layout, v: np.ndarray) -> float:
    return float(sum(np.sum(np.abs(m) ** 2) for m in block_matrices(layout, v)))


def trace(layout: Layout, v: np.ndarray) -> complex:
    return complex(layout.trace_functional @ v)


def check_density(layout: Layout, v: np.ndarray, tol: float = 1e-8) -> None:
    """Raise :class:`DomainError` unless ``v`` is a normalized density matrix."""
    if abs(trace(layout, v) - 1) > tol:
        raise DomainError(f"state trace is {trace(layout, v)}, expected 1")
    if layout.hermiticity_error(v) > tol:
        raise DomainError("state is not Hermitian")
    if min_eigenvalue(layout, v) < -tol:
        raise DomainError("state is not positive semidefinite")


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class Evolution:
    times: np.ndarray
    states: np.ndarray  # shape (len(times), dim)
    layout: Layout
    min_eigenvalues: np.ndarray | None = None
    fingerprint: str = ""

    def expect(self, names: Sequence = ("sx", "sy", "sz", "spsm")) -> dict:
        F = observable_matrix(self.layout, names)
        vals = self.states @ F.T
        return {n: vals[:, k].real for k, n in enumerate(names)}

    def sector_weights(self) -> dict:
        return {a: self.states @ f for a, f in self.layout.sector_weight_functionals().items()}


def evolve(
    L: Superoperator,
    rho0: np.ndarray,
    t_grid: Sequence,
    method: str = "rk",
    rtol: float = RTOL,
    atol: float = ATOL,
    check: bool = True,
    check_positivity: bool = True,
    t0: float | None = None,
) -> Evolution:
    """Integrate ``d rho/dt = L rho`` and return the states at ``t_grid``.

    ``method`` is ``"rk"`` (adaptive 8th-order Runge-Kutta), ``"bdf"`` (implicit,
    for stiff generators), ``"expm"`` (action of the propagator) or
    ``"krylov"`` (shift-invert Krylov propagator, one LU per step length).
    Trace and Hermiticity drift beyond ``1e-8`` raise :class:`IntegrationError`;
    states are never renormalized.  ``t0`` defaults to ``t_grid[0]``.
    """
    layout = L.layout
    v0 = np.asarray(rho0, dtype=complex)
    if v0.shape != (layout.size,):
        raise DomainError(f"state has length {v0.shape}, generator expects {layout.size}")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) < 0):
        raise DomainError("t_grid must be a non-empty nondecreasing sequence")
    start = float(t_grid[0] if t0 is None else t0)
    if check:
        check_density(layout, v0)
    A = L.matrix

    if method == "expm":
        states = _propagate_expm(A, v0, start, t_grid)
    elif method == "krylov":
        states = _propagate_krylov(A, v0, start, t_grid, rtol)
    elif method in ("rk", "bdf"):
        kwargs = dict(rtol=rtol, atol=atol, t_eval=t_grid, dense_output=False)
        if method == "rk":
            kwargs["method"] = "DOP853"
        else:
            kwargs.update(method="BDF", jac=A)
        if t_grid[-1] == start:
            states = np.repeat(v0[None, :], t_grid.size, axis=0)
        else:
            sol = solve_ivp(lambda t, y: A @ y, (start, float(t_grid[-1])), v0, **kwargs)
            if sol.status != 0:
                raise IntegrationError(f"integrator stopped: {sol.message}", time=float(sol.t[-1]))
            states = sol.y.T.copy()
    else:
        raise DomainError(f"unknown method {method!r}")

    mins = None
    if check:
        trace_fun = layout.trace_functional
        tracked = L.kind != TILTED
        for k, v in enumerate(states):
            if tracked and abs(trace_fun @ v - 1) > DRIFT_TOL:
                raise IntegrationError(f"trace drifted to {trace_fun @ v}", time=float(t_grid[k]))
            if layout.hermiticity_error(v) > DRIFT_TOL * max(1.0, np.max(np.abs(v))):
                raise IntegrationError("Hermiticity drift", time=float(t_grid[k]))
        if check_positivity and tracked:
            mins = np.array([min_eigenvalue(layout, v) for v in states])
            bad = np.nonzero(mins < -DRIFT_TOL)[0]
            if bad.size:
                k = int(bad[0])
                raise IntegrationError(f"state lost positivity (min eigenvalue {mins[k]:.3e})", time=float(t_grid[k]))
    return Evolution(t_grid, states, layout, mins, L.fingerprint)


def _propagate_expm(A, v0, start, t_grid):
    out = np.empty((t_grid.size, v0.size), dtype=complex)
    dense = A.shape[0] <= DENSE_LIMIT
    Ad = A.toarray() if dense else None
    v, t = v0, start
    cache = {}
    for k, tk in enumerate(t_grid):
        h = float(tk - t)
        if h < 0:
            raise DomainError("t_grid starts before t0")
        if h > 0:
            if dense:
                key = round(h, 14)
                if key not in cache:
                    cache[key] = sla.expm(Ad * h)
                v = cache[key] @ v
            else:
                v = spla.expm_multiply(A * h, v)
        out[k] = v
        t = tk
    return out


class ShiftInvertPropagator:
    """Action of ``exp(t A)`` from a Krylov space of ``(I - gamma A)^{-1}``.

    One sparse LU per generator and step length serves every step, however
    stiff ``A`` is, which suits piecewise-constant drives with long windows.
    """

    def __init__(self, A, t: float, tol: float = 1e-10, max_dim: int = 120):
        self.n = A.shape[0]
        self.t = float(t)
        self.gamma = self.t / 10.0
        self.tol = tol
        self.max_dim = max_dim
        M = (sp.identity(self.n, dtype=complex, format="csc") - self.gamma * sp.csc_matrix(A)).tocsc()
        self.lu = spla.splu(M)

    def apply(self, v: np.ndarray) -> np.ndarray:
        beta = float(np.linalg.norm(v))
        if beta == 0.0:
            return np.zeros_like(v)
        m_max = min(self.max_dim, self.n)
        V = np.empty((m_max + 1, self.n), dtype=complex)
        H = np.zeros((m_max + 1, m_max), dtype=complex)
        V[0] = v / beta
        prev = None
        for j in range(m_max):
            w = self.lu.solve(V[j])
            # two passes of classical Gram-Schmidt
            for _ in range(2):
                h = V[: j + 1].conj() @ w
                w -= h @ V[: j + 1]
                H[: j + 1, j] += h
            H[j + 1, j] = np.linalg.norm(w)
            breakdown = H[j + 1, j].real < 1e-14
            if not breakdown:
                V[j + 1] = w / H[j + 1, j]
            if j % 4 == 3 or breakdown or j == m_max - 1:
                k = j + 1
                Hk = H[:k, :k]
                try:
                    Ak = (np.eye(k) - np.linalg.inv(Hk)) / self.gamma
                except np.linalg.LinAlgError:
                    continue
                # early Ritz values can sit far in the right half-plane; such iterates just do not count
                with np.errstate(over="ignore", invalid="ignore"):
                    y = beta * sla.expm(self.t * Ak)[:, 0]
                if not np.all(np.isfinite(y)):
                    prev = None
                    continue
                if breakdown:
                    return y @ V[:k]
                if prev is not None:
                    change = np.linalg.norm(y[: prev.size] - prev) + np.linalg.norm(y[prev.size:])
                    if change <= self.tol * beta:
                        return y @ V[:k]
                prev = y
        raise IntegrationError(f"shift-invert Krylov propagator did not converge in {m_max} steps")


def _propagate_krylov(A, v0, start, t_grid, tol):
    out = np.empty((t_grid.size, v0.size), dtype=complex)
    props = {}
    v, t = v0, start
    for k, tk in enumerate(t_grid):
        h = float(tk - t)
        if h < 0:
            raise DomainError("t_grid starts before t0")
        if h > 0:
            key = round(h, 14)
            if key not in props:
                props[key] = ShiftInvertPropagator(A, h, tol=tol)
            v = props[key].apply(v)
        out[k] = v
        t = tk
    return out


def counting_evolution(L: Superoperator, jump: Superoperator, eta: float, rho0: np.ndarray, edges: Sequence,
                       method: str = "krylov", rtol: float = 1e-8, atol: float = 1e-10):
    """Mean detected photons in each window ``(edges[k], edges[k+1]]`` under a constant generator.

    The count ``dN/dt = eta Tr[J rho]`` is appended to the state as one more
    linear component.  Returns ``(counts, states)`` with ``states[k]`` the
    state at ``edges[k]``.
    """
    if method not in ("krylov", "bdf", "rk"):
        raise DomainError(f"unknown method {method!r}")
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise DomainError("edges must be increasing with at least one window")
    layout = L.layout
    row = eta * np.asarray(jump.matrix.T @ layout.trace_functional).ravel()
    n = layout.size
    A = sp.vstack([sp.hstack([L.matrix, sp.csr_matrix((n, 1))]),
                   sp.hstack([sp.csr_matrix(row.reshape(1, -1)), sp.csr_matrix((1, 1))])]).tocsc()
    rho = np.asarray(rho0, dtype=complex)
    states = [rho]
    counts = np.empty(edges.size - 1)
    props = {}
    for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        y0 = np.append(rho, 0.0)
        if method == "krylov":
            key = round(b - a, 14)
            if key not in props:
                props[key] = ShiftInvertPropagator(A, b - a, tol=rtol)
            y = props[key].apply(y0)
        else:
            kw = dict(method="BDF", jac=A) if method == "bdf" else dict(method="DOP853")
            sol = solve_ivp(lambda t, y: A @ y, (a, b), y0, rtol=rtol, atol=atol, **kw)
            if sol.status != 0:
                raise IntegrationError(f"integrator stopped: {sol.message}", time=float(sol.t[-1]))
            y = sol.y[:, -1]
        rho = y[:-1]
        counts[k] = y[-1].real
        if L.kind != TILTED and abs(layout.trace_functional @ rho - 1) > 1e-6:
            raise IntegrationError("trace drifted during counting evolution", time=float(b))
        states.append(rho)
    return counts, np.array(states)


def spectral_evolution(spec: "SpectralData", rho0: np.ndarray, times: Sequence) -> np.ndarray:
    """``sum_j Tr[l_j^dagger rho0] r_j e^{lambda_j t}`` using all stored modes."""
    coeff = spec.left.conj().T @ rho0
    return np.array([spec.right @ (coeff * np.exp(spec.eigenvalues * t)) for t in times])


# ---------------------------------------------------------------------------
# stationary states


@dataclass
class StationaryState:
    rho: np.ndarray
    residual: float
    layout: Layout


def _components(L: Superoperator) -> list:
    """Groups of diagonal blocks coupled by the generator."""
    layout = L.layout
    nb = len(layout.blocks)
    owner = np.repeat(np.arange(nb), np.diff(layout.offsets))
    coo = L.matrix.tocoo()
    adj = sp.coo_matrix((np.ones(coo.nnz), (owner[coo.row], owner[coo.col])), shape=(nb, nb))
    _, labels = connected_components(adj, directed=False)
    groups = {}
    for k, (a, b) in enumerate(layout.blocks):
        if a == b:
            groups.setdefault(labels[k], []).append(k)
    return list(groups.values())


def stationary_state(L: Superoperator, sector=None) -> StationaryState:
    """Unique zero mode of a Lindblad generator, normalized to unit trace.

    If the generator conserves several sectors, ``sector`` (a total spin) picks
    which stationary state to return; without it the request is ambiguous.
    """
    if L.kind not in (LINDBLAD, PI_LOCAL):
        raise DomainError(f"stationary state requires a trace-preserving generator, got {L.kind}")
    layout = L.layout
    groups = _components(L)
    if sector is not None:
        from .spinspace import two

        k = layout.block_index(two(sector), two(sector))
        groups = [g for g in groups if k in g]
    if len(groups) != 1:
        raise AmbiguityError(f"generator has {len(groups)} independent stationary sectors; pass sector=")
    idx = np.concatenate([np.arange(layout.offsets[k], layout.offsets[k + 1]) for k in groups[0]])
    A = L.matrix[idx][:, idx].tolil()
    tr = layout.trace_functional[idx]
    # replace the row carrying the largest diagonal weight with the trace constraint
    row = int(np.argmax(tr))
    A[row, :] = tr
    b = np.zeros(idx.size, dtype=complex)
    b[row] = 1.0
    A = A.tocsc()
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            x = spla.spsolve(A, b) if idx.size > DENSE_LIMIT else np.linalg.solve(A.toarray(), b)
        except (RuntimeError, np.linalg.LinAlgError, spla.MatrixRankWarning) as exc:
            raise AmbiguityError(f"stationary state is not unique: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise AmbiguityError("stationary state is not unique")
    v = np.zeros(layout.size, dtype=complex)
    v[idx] = x
    v = 0.5 * (v + layout.dagger(v))
    residual = float(np.max(np.abs(L.matrix @ v)))
    if residual > 1e-6:
        raise AmbiguityError(f"stationary solve left residual {residual:.2e}")
    return StationaryState(v, residual, layout)


# ---------------------------------------------------------------------------
# spectra


@dataclass
class SpectralData:
    eigenvalues: np.ndarray
    right: np.ndarray  # columns r_j
    left: np.ndarray  # columns l_j, Tr[l_j^dagger r_k] = delta_jk
    residuals: np.ndarray
    biorthogonality_error: float
    layout: Layout
    fingerprint: str = ""

    @property
    def k(self) -> int:
        return self.eigenvalues.size


def _sort_order(vals):
    # descending real part, ties broken by imaginary part
    return np.lexsort((np.round(vals.imag, 10), -np.round(vals.real, 10)))


def _biorthonormalize(R, Lv, layout, lindblad):
    O = Lv.conj().T @ R
    Lv = Lv @ np.linalg.inv(O).conj().T
    if lindblad:
        tr = layout.trace_functional @ R[:, 0]
        if abs(tr) > 1e-12:
            R[:, 0] /= tr
            Lv[:, 0] *= np.conj(tr)
    err = float(np.max(np.abs(Lv.conj().T @ R - np.eye(R.shape[1]))))
    return R, Lv, err


def spectrum(L: Superoperator, k: int, method: str = "auto", sigma: float | None = None) -> SpectralData:
    """The ``k`` rightmost eigenpairs with biorthonormal left eigenvectors."""
    n = L.layout.size
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}]")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "arnoldi"
    A = L.matrix
    if method == "dense":
        vals, Lv, R = sla.eig(A.toarray(), left=True, right=True)
        order = _sort_order(vals)[:k]
        vals, R, Lv = vals[order], R[:, order], Lv[:, order]
    elif method == "arnoldi":
        vals, R, Lv = _arnoldi_pairs(A, k, sigma)
    else:
        raise DomainError(f"unknown method {method!r}")
    lindblad = L.kind in (LINDBLAD, PI_LOCAL)
    try:
        R, Lv, err = _biorthonormalize(R, Lv, L.layout, lindblad)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"left/right eigenvectors could not be paired: {exc}") from exc
    res = np.linalg.norm(A @ R - R * vals, axis=0) / np.maximum(np.linalg.norm(R, axis=0), 1e-300)
    worst = float(res.max()) if res.size else 0.0
    scale = max(1.0, float(abs(A).max()))
    if worst > 1e-8 * scale:
        raise EigensolverError(f"eigenpair residual {worst:.2e} too large", residual=worst)
    return SpectralData(vals, R, Lv, res, err, L.layout, L.fingerprint)


def _arnoldi_pairs(A, k, sigma):
    """Shift-invert Arnoldi for right and left eigenvectors.

    Shift-invert finds the eigenvalues nearest ``sigma``, not those of largest
    real part, so a wider set is computed and the ``k`` rightmost are kept.
    """
    n = A.shape[0]
    if sigma is None:
        # just to the right of the spectrum of a dissipative generator
        sigma = 1e-3 * max(1.0, float(abs(A.diagonal()).max()))
    kk = min(n - 2, max(2 * k, k + 10))
    ncv = min(n - 1, max(2 * kk + 20, 40))
    try:
        vals, R = spla.eigs(A.tocsc(), k=kk, sigma=sigma, which="LM", ncv=ncv, tol=1e-12)
        lvals, Lv = spla.eigs(A.conj().T.tocsc(), k=kk, sigma=np.conj(sigma), which="LM", ncv=ncv, tol=1e-12)
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError(f"Arnoldi iteration did not converge: {exc}") from exc
    order = _sort_order(vals)
    vals, R = vals[order], R[:, order]
    # pair each right eigenvalue with the closest conjugated left eigenvalue
    lvals = np.conj(lvals)
    pick = []
    free = list(range(lvals.size))
    for v in vals:
        j = min(free, key=lambda q: abs(lvals[q] - v))
        pick.append(j)
        free.remove(j)
    return vals[:k], R[:, :k], Lv[:, pick[:k]]


def metastable_project(spec: SpectralData, rho: np.ndarray, M: int, observables: Mapping | None = None):
    """Project on the stationary state plus the ``M`` slowest modes.

    Returns the projected state vector and ``{name: <O>_P}`` for the requested
    observables, given as ``{name: functional}`` or a sequence of collective
    operator names.
    """
    if not 0 <= M < spec.k:
        raise DomainError(f"M must lie in [0, {spec.k - 1}]")
    keep = slice(0, M + 1)
    coeff = spec.left[:, keep].conj().T @ rho
    proj = spec.right[:, keep] @ coeff
    out = {}
    if observables is not None:
        if not isinstance(observables, Mapping):
            names = list(observables)
            F = observable_matrix(spec.layout, names)
            observables = dict(zip(names, F))
        out = {name: complex(f @ proj).real for name, f in observables.items()}
    return proj, out


# ---------------------------------------------------------------------------
# counting statistics


@dataclass
class ScgfCurve:
    s: np.ndarray
    theta: np.ndarray
    max_imag: float = 0.0
    params: dict = field(default_factory=dict)


def dominant_eigenvalue(L: Superoperator, upper: float | None = None) -> complex:
    """Eigenvalue of largest real part.

    Large generators use shift-invert Arnoldi at ``upper``, which must bound
    the (real) dominant eigenvalue from above: every other eigenvalue then lies
    strictly farther from the shift.
    """
    n = L.layout.size
    if n <= DOMINANT_DENSE_LIMIT:
        vals = sla.eigvals(L.matrix.toarray())
        return complex(vals[np.argmax(vals.real)])
    if upper is None:
        raise DomainError("an upper bound on the dominant eigenvalue is required for large generators")
    A = L.matrix.tocsc()
    sigma = float(upper)
    scale = max(1.0, float(abs(A).max()))
    res = np.inf
    for _ in range(4):
        try:
            vals, vecs = spla.eigs(A, k=4, sigma=sigma, which="LM", tol=0)
        except (spla.ArpackNoConvergence, RuntimeError) as exc:
            raise EigensolverError(f"dominant eigenvalue did not converge: {exc}") from exc
        j = int(np.argmax(vals.real))
        top = complex(vals[j])
        res = float(np.linalg.norm(A @ vecs[:, j] - top * vecs[:, j]) / np.linalg.norm(vecs[:, j]))
        # a loose shift converges slowly and loses accuracy; tighten and repeat
        if sigma - top.real <= 0.05 * (1.0 + abs(top.real)) and res <= 1e-8 * scale:
            return top
        sigma = top.real + 0.01 * (1.0 + abs(top.real))
    raise EigensolverError(f"dominant eigenpair residual {res:.2e}", residual=res)


def scgf(
    lindblad: Superoperator | Callable,
    jump: Superoperator | None = None,
    eta: float = 1.0,
    s_grid: Sequence = (),
    mean_rate: float | None = None,
) -> ScgfCurve:
    """Dominant eigenvalue of the tilted generator on a grid of counting fields.

    Either pass the Lindblad generator and the collective jump superoperator,
    or a callable ``s -> tilted Superoperator``.  Large generators are handled
    by continuation from ``s = 0``: theta is nonincreasing, so the previous
    value bounds the next one for growing ``s``; for decreasing ``s`` the
    bound is extrapolated from the current slope (``mean_rate`` seeds the first
    step and defaults to the stationary photon flux).
    """
    s_grid = np.asarray(sorted(set(float(s) for s in s_grid)))
    if s_grid.size == 0:
        raise DomainError("empty s grid")
    if callable(lindblad) and not isinstance(lindblad, Superoperator):
        build = lindblad
    else:
        build = lambda s: tilt(lindblad, jump, eta, s)  # noqa: E731
    large = build(0.0).layout.size > DOMINANT_DENSE_LIMIT
    if large and mean_rate is None and np.any(s_grid < 0):
        base = build(0.0)
        ss = stationary_state(Superoperator(base.matrix, LINDBLAD, base.layout, base.params))
        if isinstance(lindblad, Superoperator):
            mean_rate = float((eta * jump.layout.trace_functional @ (jump.matrix @ ss.rho)).real)
        else:
            h = 1e-4
            mean_rate = float((base.layout.trace_functional @ ((base.matrix - build(h).matrix) @ ss.rho)).real / h)
    thetas = np.empty(s_grid.size, dtype=complex)
    if not large:
        for k, s in enumerate(s_grid):
            thetas[k] = dominant_eigenvalue(build(s))
    else:
        found = _continuation(build, s_grid[s_grid >= 0], 0.0)
        found.update(_continuation(build, s_grid[s_grid < 0][::-1], mean_rate))
        thetas[:] = [found[s] for s in s_grid]
    max_imag = float(np.max(np.abs(thetas.imag)))
    if max_imag > 1e-9 * max(1.0, float(np.max(np.abs(thetas.real)))):
        raise EigensolverError(f"dominant tilted eigenvalue is not real (imag {max_imag:.2e})")
    params = dict(getattr(lindblad, "params", {}), eta=eta)
    return ScgfCurve(s_grid, thetas.real, max_imag, params)


# largest counting-field increment between successive shift-invert solves
CONTINUATION_STEP = 0.02


def _continuation(build, targets, slope):
    """Follow theta(s) from s = 0 through ``targets`` (ordered away from zero)."""
    out = {}
    s_prev, t_prev = 0.0, 0.0
    for target in targets:
        if target == 0:
            out[target] = 0.0
            continue
        n = max(1, int(np.ceil(abs(target - s_prev) / CONTINUATION_STEP)))
        for s in np.linspace(s_prev, target, n + 1)[1:]:
            if s > s_prev:
                # theta is nonincreasing in s
                upper = t_prev + 1e-3 * (1.0 + abs(t_prev))
            else:
                ds = s_prev - s
                # slope magnitude grows by at most e^{ds} per step for a counting process
                upper = t_prev + 2.0 * max(slope, 0.0) * np.expm1(ds) + 1e-3 * (1.0 + abs(t_prev))
            th = dominant_eigenvalue(build(float(s)), upper)
            if s < s_prev:
                slope = max(slope, (th.real - t_prev) / (s_prev - s))
            s_prev, t_prev = s, th.real
        out[target] = th
    return out


def cumulant_grid(h: float = 1e-3) -> np.ndarray:
    return np.array([-2 * h, -h, 0.0, h, 2 * h])


@dataclass
class Cumulants:
    mean: float
    variance_T: float
    step: float


def cumulants_from_scgf(curve: ScgfCurve, h: float = 1e-3) -> Cumulants:
    """Mean rate ``-theta'(0)`` and scaled variance ``theta''(0)`` by Richardson-extrapolated central differences."""
    lookup = {}
    for s, th in zip(curve.s, curve.theta):
        lookup[round(s / h, 9)] = th
    need = (-2.0, -1.0, 0.0, 1.0, 2.0)
    missing = [q for q in need if q not in lookup]
    if missing:
        raise EstimatorInputError(f"curve lacks samples at s = {[q * h for q in missing]}")
    tm2, tm1, t0, tp1, tp2 = (lookup[q] for q in need)
    d1_h = (tp1 - tm1) / (2 * h)
    d1_2h = (tp2 - tm2) / (4 * h)
    d2_h = (tp1 - 2 * t0 + tm1) / h**2
    d2_2h = (tp2 - 2 * t0 + tm2) / (4 * h**2)
    d1 = (4 * d1_h - d1_2h) / 3
    d2 = (4 * d2_h - d2_2h) / 3
    return Cumulants(mean=float(-d1), variance_T=float(d2), step=h)


# ---------------------------------------------------------------------------
# CSV output


def _write_csv(path, kind, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# spincount {kind} v{CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_timeseries_csv(path, times, columns: Mapping) -> None:
    names = list(columns)
    rows = zip(times, *(np.real(columns[n]) for n in names))
    _write_csv(path, "timeseries", ["t", *names], rows)


def write_spectrum_csv(path, eigenvalues) -> None:
    rows = ((j, v.real, v.imag) for j, v in enumerate(np.asarray(eigenvalues, dtype=complex)))
    _write_csv(path, "spectrum", ["j", "re_lambda", "im_lambda"], rows)


def write_scgf_csv(path, curve: ScgfCurve) -> None:
    _write_csv(path, "scgf", ["s", "theta"], zip(curve.s, curve.theta))


def read_csv(path) -> tuple:
    """Return ``(kind, header, array)`` for a file written by this module."""
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) < 3 or first[1] != "spincount":
            raise DomainError(f"{path} is not a spincount CSV file")
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    try:
        data = np.array([[float(x) for x in row] for row in rows])
    except ValueError:
        # tables with text columns come back as rows of strings
        data = rows
    return first[2], header, data


def write_table_csv(path, kind: str, header: Sequence, rows) -> None:
    """Generic versioned CSV table with a ``# spincount <kind>`` preamble."""
    _write_csv(path, kind, list(header), rows)
