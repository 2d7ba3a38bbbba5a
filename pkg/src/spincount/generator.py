"""Superoperators acting on vectorized, block-structured density matrices.

A state is stored as a flat complex vector holding a list of rectangular
blocks ``rho^{S,S'}`` (rows in sector ``S``, columns in sector ``S'``).  Each
block is vectorized by column stacking, ``vec(rho)[i + j*rows] = rho[i, j]``,
so that ``vec(A X B) = (B^T kron A) vec(X)``.

Two families of block layouts occur:

* sector layouts, used for one or a few fixed total spins and including the
  inter-sector coherence blocks;
* Dicke layouts, used for ``N`` spins with local decay.  Only diagonal blocks
  ``(j, j)`` appear and entries are stored with the degeneracy folded in,
  ``rho = sum_j sum_{m,m'} rho_{j,m,m'} (1/d_j) sum_i |j,m,i><j,m',i|``, so the
  total trace is ``sum_j sum_m rho_{j,m,m}`` and collective expectations are
  evaluated blockwise exactly as for a single sector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .spinspace import (
    HalfInt,
    SpinLike,
    allowed_two_s,
    build_sector_ops,
    check_sector,
    max_jump_rate_factor,
    two,
)

LINDBLAD = "lindblad"
TILTED = "tilted"
PI_LOCAL = "pi_local"


# ---------------------------------------------------------------------------
# layouts


@dataclass(frozen=True)
class Layout:
    """Ordered list of blocks ``(2S_row, 2S_col)`` making up a state vector."""

    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(a), int(b)) for a, b in self.blocks))
        if len(set(self.blocks)) != len(self.blocks):
            raise DomainError("duplicate blocks in layout")

    @cached_property
    def shapes(self) -> tuple:
        return tuple((a + 1, b + 1) for a, b in self.blocks)

    @cached_property
    def offsets(self) -> np.ndarray:
        sizes = [r * c for r, c in self.shapes]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def diagonal_sectors(self) -> tuple:
        return tuple(a for a, b in self.blocks if a == b)

    def block_index(self, two_s_row: int, two_s_col: int) -> int:
        return self.blocks.index((two_s_row, two_s_col))

    def block_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def unvec(self, v: np.ndarray) -> dict:
        """Split a state vector into ``{(2S, 2S'): matrix}``."""
        out = {}
        for k, (blk, (r, c)) in enumerate(zip(self.blocks, self.shapes)):
            out[blk] = v[self.block_slice(k)].reshape((c, r)).T
        return out

    def vec(self, blocks: Mapping) -> np.ndarray:
        v = np.zeros(self.size, dtype=complex)
        for key, mat in blocks.items():
            k = self.block_index(*key)
            r, c = self.shapes[k]
            mat = np.asarray(mat, dtype=complex)
            if mat.shape != (r, c):
                raise DomainError(f"block {key} has shape {mat.shape}, expected {(r, c)}")
            v[self.block_slice(k)] = mat.T.reshape(-1)
        return v

    def observable(self, op_of_sector) -> np.ndarray:
        """Row vector ``f`` with ``f @ v = Tr[O rho]`` for a sector-diagonal observable.

        ``op_of_sector(two_s)`` returns the (sparse or dense) matrix of ``O`` in
        that sector.
        """
        f = np.zeros(self.size, dtype=complex)
        for k, (a, b) in enumerate(self.blocks):
            if a != b:
                continue
            op = op_of_sector(a)
            op = op.toarray() if sp.issparse(op) else np.asarray(op)
            # Tr[O rho] = sum_{i,j} O[j, i] rho[i, j] = vec(O^T) . vec(rho)
            f[self.block_slice(k)] = op.T.reshape(-1, order="F")
        return f

    @cached_property
    def trace_functional(self) -> np.ndarray:
        return self.observable(lambda t: np.eye(t + 1)).real

    def sector_weight_functionals(self) -> dict:
        """``{2S: f}`` with ``f @ v`` the population of sector ``S``."""
        out = {}
        for k, (a, b) in enumerate(self.blocks):
            if a != b:
                continue
            f = np.zeros(self.size)
            f[self.block_slice(k)] = np.eye(a + 1).reshape(-1)
            out[a] = f
        return out

    @cached_property
    def dagger_permutation(self) -> np.ndarray:
        """Index map ``p`` such that ``vec(rho^dagger) = conj(v[p])``."""
        perm = np.empty(self.size, dtype=int)
        for k, (a, b) in enumerate(self.blocks):
            r, c = self.shapes[k]
            kt = self.block_index(b, a)
            i, j = np.meshgrid(np.arange(r), np.arange(c), indexing="ij")
            # element (i, j) of block (a, b) is conj of element (j, i) of block (b, a)
            perm[self.offsets[k] + i + j * r] = self.offsets[kt] + j + i * c
        return perm

    def dagger(self, v: np.ndarray) -> np.ndarray:
        return np.conj(v[..., self.dagger_permutation])

    def hermiticity_error(self, v: np.ndarray) -> float:
        return float(np.max(np.abs(v - self.dagger(v)), initial=0.0))

    def to_json(self) -> list:
        return [list(b) for b in self.blocks]


def sector_layout(sectors: Sequence) -> Layout:
    """All blocks ``(S, S')`` for the given sectors, diagonal blocks first."""
    twos = [two(s) for s in sectors]
    if len(set(twos)) != len(twos):
        raise DomainError("sectors must be distinct")
    blocks = [(a, a) for a in twos]
    blocks += [(a, b) for a in twos for b in twos if a != b]
    return Layout(tuple(blocks))


def dicke_layout(N: int) -> Layout:
    return Layout(tuple((t, t) for t in allowed_two_s(N)))


# ---------------------------------------------------------------------------
# superoperators


def _fingerprint(kind: str, params: Mapping, layout: Layout) -> str:
    payload = json.dumps(
        {"kind": kind, "params": {k: params[k] for k in sorted(params)}, "blocks": layout.to_json()},
        sort_keys=True,
        default=float,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Superoperator:
    """Sparse generator on vectorized states.  Immutable once built."""

    matrix: sp.csr_matrix
    kind: str
    layout: Layout
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.layout.size

    @cached_property
    def fingerprint(self) -> str:
        return _fingerprint(self.kind, self.params, self.layout)

    def __matmul__(self, v):
        return self.matrix @ v

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "nnz": int(self.matrix.nnz),
            "params": dict(self.params),
            "fingerprint": self.fingerprint,
        }


def _csr(mat) -> sp.csr_matrix:
    out = sp.csr_matrix(mat, dtype=complex)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def _block_lindblad(two_a: int, two_b: int, omega: float, kappa: float) -> sp.csr_matrix:
    """Collective generator on block ``(a, b)`` built from Kronecker products."""
    A = build_sector_ops(HalfInt(two_a))
    B = build_sector_ops(HalfInt(two_b))
    eye_a = sp.identity(A.dim, dtype=complex, format="csr")
    eye_b = sp.identity(B.dim, dtype=complex, format="csr")
    # H rho - rho H on block (a, b)
    comm = sp.kron(eye_b, A.s_x) - sp.kron(B.s_x.T, eye_a)
    # S- rho S+ : (S+_b)^T = S-_b since the ladder matrices are real
    jump = sp.kron(B.s_minus, A.s_minus)
    anti = sp.kron(eye_b, A.s_plus_s_minus) + sp.kron(B.s_plus_s_minus.T, eye_a)
    return _csr(-1j * omega * comm + kappa * (jump - 0.5 * anti))


def _block_jump(two_a: int, two_b: int) -> sp.csr_matrix:
    A = build_sector_ops(HalfInt(two_a))
    B = build_sector_ops(HalfInt(two_b))
    return _csr(sp.kron(B.s_minus, A.s_minus))


def _block_diag(mats) -> sp.csr_matrix:
    return _csr(sp.block_diag(mats, format="csr"))


def build_lindblad(S: SpinLike, omega: float, kappa: float = 1.0) -> Superoperator:
    """Collective Lindblad generator on a single sector, ``H = omega Sx``, ``L = sqrt(kappa) S-``."""
    _check_rates(omega=omega, kappa=kappa)
    t = two(S)
    if t < 0:
        raise DomainError("total spin must be non-negative")
    layout = Layout(((t, t),))
    mat = _block_lindblad(t, t, omega, kappa)
    return Superoperator(mat, LINDBLAD, layout, {"two_S": [t], "omega": float(omega), "kappa": float(kappa)})


def multisector_block(two_a: int, two_b: int, omega: float, kappa: float) -> sp.csr_matrix:
    """Block ``(S, S')`` assembled element by element from the ladder coefficients.

    Independent of the Kronecker route in :func:`build_lindblad`; the two are
    compared in the tests.
    """
    S, Sp = two_a / 2, two_b / 2
    ra, rb = two_a + 1, two_b + 1
    i, k = np.meshgrid(np.arange(ra), np.arange(rb), indexing="ij")
    i, k = i.ravel(), k.ravel()
    sz, szp = S - i, Sp - k
    out = i + k * ra
    rows, cols, vals = [], [], []

    def add(mask, src_i, src_k, value):
        rows.append(out[mask])
        cols.append((src_i + src_k * ra)[mask])
        vals.append(np.broadcast_to(value, out.shape)[mask])

    # drive acting from the left, sources rho_{Sz-1,Sz'} and rho_{Sz+1,Sz'}
    add(sz > -S, i + 1, k, -0.5j * omega * np.sqrt(np.maximum((S - sz + 1) * (S + sz), 0)))
    add(sz < S, i - 1, k, -0.5j * omega * np.sqrt(np.maximum((S + sz + 1) * (S - sz), 0)))
    # drive acting from the right
    add(szp > -Sp, i, k + 1, 0.5j * omega * np.sqrt(np.maximum((Sp - szp + 1) * (Sp + szp), 0)))
    add(szp < Sp, i, k - 1, 0.5j * omega * np.sqrt(np.maximum((Sp + szp + 1) * (Sp - szp), 0)))
    # jump term feeding from rho_{Sz+1,Sz'+1}
    feed = np.sqrt(np.maximum((S + sz + 1) * (S - sz) * (Sp + szp + 1) * (Sp - szp), 0))
    add((sz < S) & (szp < Sp), i - 1, k - 1, kappa * feed)
    # loss
    loss = (S + sz) * (S - sz + 1) + (Sp + szp) * (Sp - szp + 1)
    add(np.ones_like(out, dtype=bool), i, k, -0.5 * kappa * loss)

    n = ra * rb
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return _csr(mat)


@dataclass(frozen=True)
class MultiSectorLiouvillian:
    """Block-diagonal collective generator including inter-sector coherences."""

    blocks: dict
    superoperator: Superoperator

    @property
    def layout(self) -> Layout:
        return self.superoperator.layout


def build_multisector(sectors: Sequence, omega: float, kappa: float = 1.0) -> MultiSectorLiouvillian:
    _check_rates(omega=omega, kappa=kappa)
    layout = sector_layout(sectors)
    blocks = {blk: multisector_block(blk[0], blk[1], omega, kappa) for blk in layout.blocks}
    mat = _block_diag([blocks[b] for b in layout.blocks])
    params = {"two_S": [a for a in layout.diagonal_sectors], "omega": float(omega), "kappa": float(kappa)}
    return MultiSectorLiouvillian(blocks, Superoperator(mat, LINDBLAD, layout, params))


def collective_jump(layout: Layout, kappa: float = 1.0) -> Superoperator:
    """``rho -> kappa S- rho S+`` on every block of the layout."""
    mat = kappa * _block_diag([_block_jump(a, b) for a, b in layout.blocks])
    return Superoperator(_csr(mat), "jump", layout, {"kappa": float(kappa)})


def tilt(lindblad: Superoperator, jump: Superoperator, eta: float, s: float) -> Superoperator:
    """Counting-field deformation ``L + eta (e^{-s} - 1) J``."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"efficiency must lie in [0, 1], got {eta}")
    if lindblad.layout != jump.layout:
        raise DomainError("generator and jump superoperator live on different layouts")
    mat = lindblad.matrix + eta * np.expm1(-s) * jump.matrix
    params = dict(lindblad.params, eta=float(eta), s=float(s), base=lindblad.kind)
    return Superoperator(_csr(mat), TILTED, lindblad.layout, params)


def build_tilted(S: SpinLike, omega: float, kappa: float, eta: float, s: float) -> Superoperator:
    L = build_lindblad(S, omega, kappa)
    return tilt(L, collective_jump(L.layout, kappa), eta, s)


# ---------------------------------------------------------------------------
# permutation-invariant local decay


def local_decay_rate(N: int, two_j: int, two_m: int, two_j_target: int) -> float:
    """Per-state rate (in units of the local decay rate) for ``|j, m> -> |j', m-1>``.

    Summed over the three reachable ``j'`` it equals ``N/2 + m``, the expected
    number of excited spins.
    """
    j, m = two_j / 2, two_m / 2
    half = N / 2
    if two_j_target == two_j:
        if two_j == 0:
            return 0.0
        return (half + 1) * (j + m) * (j - m + 1) / (2 * j * (j + 1))
    if two_j_target == two_j - 2:
        if two_j == 0:
            return 0.0
        return (half + j + 1) * (j + m) * (j + m - 1) / (2 * j * (2 * j + 1))
    if two_j_target == two_j + 2:
        return (half - j) * (j - m + 1) * (j - m + 2) / (2 * (j + 1) * (2 * j + 1))
    return 0.0


def _pi_local_matrix(N: int, layout: Layout) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    index = {blk[0]: k for k, blk in enumerate(layout.blocks)}
    for k, (t, _) in enumerate(layout.blocks):
        d = t + 1
        off = layout.offsets[k]
        two_m = t - 2 * np.arange(d)
        i, q = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        i, q = i.ravel(), q.ravel()
        target = off + i + q * d
        # loss -(1/2){sum_j sigma+ sigma-, rho}, with sum_j sigma+ sigma- = N/2 + Sz
        rows.append(target)
        cols.append(target)
        vals.append(-0.5 * (N + (two_m[i] + two_m[q]) / 2))
        # feeding from (j_s, m+1, m'+1)
        for ts in (t - 2, t, t + 2):
            if ts not in index:
                continue
            ks = index[ts]
            ds = ts + 1
            src_m, src_mp = two_m[i] + 2, two_m[q] + 2
            ok = (np.abs(src_m) <= ts) & (np.abs(src_mp) <= ts)
            if not ok.any():
                continue
            g = np.array([local_decay_rate(N, ts, a, t) for a in src_m[ok]])
            gp = np.array([local_decay_rate(N, ts, a, t) for a in src_mp[ok]])
            si = (ts - src_m[ok]) // 2
            sq = (ts - src_mp[ok]) // 2
            rows.append(target[ok])
            cols.append(layout.offsets[ks] + si + sq * ds)
            vals.append(np.sqrt(g * gp))
    n = layout.size
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return _csr(mat)


def build_pi_generator(N: int, omega: float, kappa: float = 1.0, gamma: float = 0.0) -> Superoperator:
    """Collective drive and decay plus local decay on the folded Dicke representation."""
    _check_rates(omega=omega, kappa=kappa, gamma=gamma)
    if N < 1:
        raise DomainError("need at least one spin")
    layout = dicke_layout(N)
    mat = _block_diag([_block_lindblad(t, t, omega, kappa) for t, _ in layout.blocks])
    if gamma > 0:
        mat = _csr(mat + gamma * _pi_local_matrix(N, layout))
    params = {"N": int(N), "omega": float(omega), "kappa": float(kappa), "gamma": float(gamma)}
    return Superoperator(mat, PI_LOCAL, layout, params)


# ---------------------------------------------------------------------------
# systems: a layout plus the parameter-independent pieces needed by solvers


@dataclass(frozen=True)
class SectorSystem:
    """Collective model on a fixed set of total-spin sectors (with coherences)."""

    sectors: tuple
    kappa: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sectors", tuple(HalfInt.of(s) for s in self.sectors))
        _check_rates(kappa=self.kappa)

    @cached_property
    def layout(self) -> Layout:
        return sector_layout(self.sectors)

    @property
    def gamma(self) -> float:
        return 0.0

    def liouvillian(self, omega: float) -> Superoperator:
        if len(self.sectors) == 1:
            return build_lindblad(self.sectors[0], omega, self.kappa)
        return build_multisector(self.sectors, omega, self.kappa).superoperator

    @cached_property
    def jump(self) -> Superoperator:
        return collective_jump(self.layout, self.kappa)

    def max_jump_factor(self) -> float:
        return max(max_jump_rate_factor(s) for s in self.sectors)

    def describe(self) -> dict:
        return {"type": "sectors", "two_S": [s.twice_value for s in self.sectors], "kappa": self.kappa}


@dataclass(frozen=True)
class DickeSystem:
    """``N`` spins with collective drive/decay and unmonitored local decay."""

    N: int
    kappa: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        _check_rates(kappa=self.kappa, gamma=self.gamma)
        if self.N < 1:
            raise DomainError("need at least one spin")

    @cached_property
    def layout(self) -> Layout:
        return dicke_layout(self.N)

    @property
    def sectors(self) -> tuple:
        return tuple(HalfInt(t) for t in allowed_two_s(self.N))

    def liouvillian(self, omega: float) -> Superoperator:
        return build_pi_generator(self.N, omega, self.kappa, self.gamma)

    @cached_property
    def jump(self) -> Superoperator:
        return collective_jump(self.layout, self.kappa)

    def max_jump_factor(self) -> float:
        return max_jump_rate_factor(HalfInt(self.N))

    def describe(self) -> dict:
        return {"type": "dicke", "N": self.N, "kappa": self.kappa, "gamma": self.gamma}


def observable_functional(layout: Layout, name: str) -> np.ndarray:
    """Functional for ``sx, sy, sz, splus_sminus`` (collective operators)."""
    attr = {"sx": "s_x", "sy": "s_y", "sz": "s_z", "spsm": "s_plus_s_minus", "splus_sminus": "s_plus_s_minus"}
    if name not in attr:
        raise DomainError(f"unknown observable {name!r}")
    return layout.observable(lambda t: getattr(build_sector_ops(HalfInt(t)), attr[name]))


OBSERVABLES = ("sx", "sy", "sz", "spsm")


def observable_matrix(layout: Layout, names: Iterable = OBSERVABLES) -> np.ndarray:
    return np.array([observable_functional(layout, n) for n in names])


# ---------------------------------------------------------------------------
# state constructors


def sector_ket_state(system_layout: Layout, S: SpinLike, Sz: SpinLike) -> np.ndarray:
    """Vector of ``|S, Sz><S, Sz|`` (works for sector and Dicke layouts)."""
    t = two(S)
    d = t + 1
    mat = np.zeros((d, d), dtype=complex)
    idx = (t - two(Sz)) // 2
    if not 0 <= idx < d or (t - two(Sz)) % 2:
        raise DomainError(f"Sz={HalfInt(two(Sz))} is not in sector S={HalfInt(t)}")
    mat[idx, idx] = 1.0
    return system_layout.vec({(t, t): mat})


def pure_state(layout: Layout, amplitudes: Mapping) -> np.ndarray:
    """``|psi><psi|`` for ``|psi> = sum_S psi_S`` given ``{S: vector in sector S}``."""
    vecs = {two(S): np.asarray(a, dtype=complex) for S, a in amplitudes.items()}
    norm = sum(np.vdot(a, a).real for a in vecs.values())
    blocks = {}
    for a, va in vecs.items():
        for b, vb in vecs.items():
            if (a, b) in layout.blocks:
                blocks[(a, b)] = np.outer(va, vb.conj()) / norm
    return layout.vec(blocks)


def mixed_state(layout: Layout, weighted: Mapping) -> np.ndarray:
    """Incoherent mixture ``sum_S p_S rho_S`` from ``{S: (p_S, density matrix)}``."""
    blocks = {}
    for S, (p, rho) in weighted.items():
        t = two(S)
        blocks[(t, t)] = p * np.asarray(rho, dtype=complex)
    return layout.vec(blocks)


def dicke_sector_state(N: int, S: SpinLike, Sz: SpinLike) -> np.ndarray:
    """Equal-weight mixture over the degenerate copies of ``|S, Sz>``."""
    check_sector(N, S)
    return sector_ket_state(dicke_layout(N), S, Sz)


def _check_rates(**rates):
    for name, val in rates.items():
        if not np.isfinite(val):
            raise DomainError(f"{name} must be finite")
        if name == "kappa" and val <= 0:
            raise DomainError(f"kappa must be positive, got {val}")
        if name != "kappa" and val < 0:
            raise DomainError(f"{name} must be non-negative, got {val}")
