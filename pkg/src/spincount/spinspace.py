"""Angular-momentum bookkeeping for ensembles of spin-1/2 particles.

Half-integers are carried as doubled integers (``two_s = 2*S``) so that
sector arithmetic stays exact for odd particle numbers.  Every sector basis
is ordered by descending magnetization, ``|S, S>, |S, S-1>, ..., |S, -S>``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np
import scipy.sparse as sp

from .errors import DomainError

ORDERING = "descending_sz"
PRODUCT_SPACE_MAX_N = 6


@functools.total_ordering
@dataclass(frozen=True)
class HalfInt:
    """An exact half-integer stored as twice its value."""

    twice_value: int

    def __post_init__(self):
        if not isinstance(self.twice_value, (int, np.integer)):
            raise DomainError(f"twice_value must be an integer, got {self.twice_value!r}")
        object.__setattr__(self, "twice_value", int(self.twice_value))

    @classmethod
    def of(cls, value: "SpinLike") -> "HalfInt":
        """Convert ``5``, ``2.5``, ``"5/2"`` or a :class:`HalfInt` to a HalfInt."""
        if isinstance(value, HalfInt):
            return value
        if isinstance(value, str):
            value = Fraction(value)
        twice = Fraction(value) * 2
        if twice.denominator != 1:
            raise DomainError(f"{value!r} is not a half-integer")
        return cls(int(twice))

    @property
    def value(self) -> float:
        return self.twice_value / 2

    @property
    def is_integer(self) -> bool:
        return self.twice_value % 2 == 0

    def __float__(self):
        return self.value

    def __eq__(self, other):
        if isinstance(other, HalfInt):
            return self.twice_value == other.twice_value
        try:
            return self.twice_value == HalfInt.of(other).twice_value
        except (DomainError, TypeError, ValueError):
            return NotImplemented

    def __lt__(self, other):
        return self.twice_value < HalfInt.of(other).twice_value

    def __hash__(self):
        return hash(self.twice_value)

    def __str__(self):
        if self.is_integer:
            return str(self.twice_value // 2)
        return f"{self.twice_value}/2"

    def __repr__(self):
        return f"HalfInt({self})"


SpinLike = Union[HalfInt, int, float, str, Fraction]


def two(value: SpinLike) -> int:
    """Doubled integer representation of a spin quantum number."""
    return HalfInt.of(value).twice_value


def check_sector(N: int, S: SpinLike) -> int:
    """Validate the pairing of particle number and total spin, return 2S."""
    two_s = two(S)
    if N < 0:
        raise DomainError(f"particle number must be non-negative, got {N}")
    if two_s < 0 or two_s > N or (N - two_s) % 2:
        raise DomainError(f"S={HalfInt(two_s)} is not a valid total spin for N={N}")
    return two_s


@dataclass(frozen=True)
class SectorBasis:
    """Basis ``|S, m>`` of one total angular momentum sector."""

    S: HalfInt

    @property
    def dim(self) -> int:
        return self.S.twice_value + 1

    @property
    def two_m(self) -> np.ndarray:
        return np.arange(self.S.twice_value, -self.S.twice_value - 1, -2)

    @property
    def m(self) -> np.ndarray:
        return self.two_m / 2

    def index(self, Sz: SpinLike) -> int:
        two_m = two(Sz)
        two_s = self.S.twice_value
        if abs(two_m) > two_s or (two_s - two_m) % 2:
            raise DomainError(f"Sz={HalfInt(two_m)} is not in sector S={self.S}")
        return (two_s - two_m) // 2

    def ket(self, Sz: SpinLike) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[self.index(Sz)] = 1.0
        return v


@dataclass(frozen=True)
class CollectiveOps:
    """Sparse collective spin operators on one sector.  Treat as read-only."""

    S: HalfInt
    s_plus: sp.csr_matrix
    s_minus: sp.csr_matrix
    s_x: sp.csr_matrix
    s_y: sp.csr_matrix
    s_z: sp.csr_matrix
    s_plus_s_minus: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.S.twice_value + 1

    def dense(self, name: str) -> np.ndarray:
        return getattr(self, name).toarray()


def ladder_coefficients(two_s: int) -> np.ndarray:
    """``<S, m+1| S+ |S, m>`` for m = S-1, ..., -S (superdiagonal of S+)."""
    S = two_s / 2
    m = np.arange(two_s - 2, -two_s - 1, -2) / 2
    return np.sqrt(np.maximum(S * (S + 1) - m * (m + 1), 0.0))


@functools.lru_cache(maxsize=256)
def _sector_ops(two_s: int) -> CollectiveOps:
    dim = two_s + 1
    S = HalfInt(two_s)
    coeff = ladder_coefficients(two_s)
    s_plus = sp.diags(coeff.astype(complex), 1, shape=(dim, dim), format="csr")
    s_minus = sp.csr_matrix(s_plus.conj().T)
    m = np.arange(two_s, -two_s - 1, -2) / 2
    s_z = sp.diags(m.astype(complex), 0, format="csr")
    s_x = sp.csr_matrix((s_plus + s_minus) / 2)
    s_y = sp.csr_matrix((s_plus - s_minus) / 2j)
    # S+S- is diagonal with S(S+1) - m(m-1)
    pm = S.value * (S.value + 1) - m * (m - 1)
    s_pm = sp.diags(pm.astype(complex), 0, format="csr")
    for mat in (s_plus, s_minus, s_z, s_x, s_y, s_pm):
        mat.sort_indices()
    return CollectiveOps(S, s_plus, s_minus, s_x, s_y, s_z, s_pm)


def build_sector_ops(S: SpinLike) -> CollectiveOps:
    """Collective operators ``S+-, Sx, Sy, Sz, S+S-`` for total spin ``S``."""
    two_s = two(S)
    if two_s < 0:
        raise DomainError(f"total spin must be non-negative, got {HalfInt(two_s)}")
    return _sector_ops(two_s)


def max_jump_rate_factor(S: SpinLike) -> float:
    """Largest eigenvalue of ``S+S-`` inside sector ``S``."""
    two_s = two(S)
    S_ = two_s / 2
    m_star = 0.5 if two_s % 2 else (1.0 if two_s > 0 else 0.0)
    return S_ * (S_ + 1) - m_star * (m_star - 1)


def dicke_degeneracy(N: int, S: SpinLike) -> int:
    """Number of irreducible copies of spin ``S`` inside ``N`` spin-1/2 particles."""
    two_s = check_sector(N, S)
    a = (N + two_s) // 2  # N/2 + S
    b = (N - two_s) // 2  # N/2 - S
    return (two_s + 1) * math.factorial(N) // (math.factorial(a + 1) * math.factorial(b))


def allowed_two_s(N: int) -> list:
    """Doubled total spins for ``N`` particles, largest first."""
    return list(range(N, -1, -2))


@dataclass(frozen=True)
class DickeSpace:
    N: int

    @property
    def sectors(self) -> list:
        return [(HalfInt(t), dicke_degeneracy(self.N, HalfInt(t))) for t in allowed_two_s(self.N)]

    @property
    def total_dim_check(self) -> int:
        return sum(d * (s.twice_value + 1) for s, d in self.sectors)

    @property
    def n_elements(self) -> int:
        """Number of complex entries rho_{S; m, m'} in the compressed representation."""
        return sum((t + 1) ** 2 for t in allowed_two_s(self.N))


@dataclass(frozen=True)
class JumpRates:
    collective: float
    local: float

    @property
    def ratio(self):
        """Local over collective rate; ``None`` where the collective rate vanishes."""
        if self.collective == 0:
            return None
        return self.local / self.collective


def jump_rates(N: int, S: SpinLike, Sz: SpinLike, kappa: float = 1.0, gamma: float = 1.0) -> JumpRates:
    two_s = check_sector(N, S)
    two_m = two(Sz)
    if abs(two_m) > two_s or (two_s - two_m) % 2:
        raise DomainError(f"Sz={HalfInt(two_m)} is not in sector S={HalfInt(two_s)}")
    s, m = two_s / 2, two_m / 2
    collective = kappa * (s * (s + 1) - m * (m - 1))
    local = gamma / 2 * (N + 2 * m)
    # exact zeros stay exact zeros
    return JumpRates(float(collective) + 0.0, float(local) + 0.0)


class ProductSpace:
    """Full ``2**N`` Hilbert space of ``N`` spin-1/2 particles.

    Only meant as a validation oracle, so ``N`` is capped at
    :data:`PRODUCT_SPACE_MAX_N`.  Site ordering follows ``np.kron`` with the
    single-site basis ``(|up>, |down>)``.
    """

    def __init__(self, N: int):
        if N < 1 or N > PRODUCT_SPACE_MAX_N:
            raise DomainError(f"product-space oracle supports 1 <= N <= {PRODUCT_SPACE_MAX_N}, got {N}")
        self.N = N
        self.dim = 2**N
        sig_minus = np.array([[0, 0], [1, 0]], dtype=complex)
        sig_z = np.diag([1.0, -1.0]).astype(complex)
        sig_x = np.array([[0, 1], [1, 0]], dtype=complex)
        sig_y = np.array([[0, -1j], [1j, 0]], dtype=complex)
        self.local_minus = [self._site(sig_minus, j) for j in range(N)]
        self.s_x = sum(self._site(sig_x, j) for j in range(N)) / 2
        self.s_y = sum(self._site(sig_y, j) for j in range(N)) / 2
        self.s_z = sum(self._site(sig_z, j) for j in range(N)) / 2
        self.s_plus = self.s_x + 1j * self.s_y
        self.s_minus = self.s_x - 1j * self.s_y
        self.s_squared = self.s_x @ self.s_x + self.s_y @ self.s_y + self.s_z @ self.s_z

    def _site(self, op, j):
        out = np.eye(1, dtype=complex)
        for k in range(self.N):
            out = np.kron(out, op if k == j else np.eye(2))
        return out

    def projector(self, S: SpinLike, Sz: SpinLike | None = None) -> np.ndarray:
        """Projector onto total spin ``S`` (and magnetization ``Sz`` if given)."""
        two_s = check_sector(self.N, S)
        s = two_s / 2
        proj = np.eye(self.dim, dtype=complex)
        for t in allowed_two_s(self.N):
            if t == two_s:
                continue
            o = t / 2
            proj = proj @ (self.s_squared - o * (o + 1) * np.eye(self.dim)) / (s * (s + 1) - o * (o + 1))
        if Sz is not None:
            m = two(Sz) / 2
            mask = np.isclose(np.real(np.diag(self.s_z)), m).astype(complex)
            proj = proj @ np.diag(mask)
        return proj

    def pi_basis_operator(self, S: SpinLike, Sz: SpinLike, Sz_prime: SpinLike) -> np.ndarray:
        """``sum_i |S,m,i><S,m',i| / d(N,S)``: one unit of the compressed representation."""
        two_s = check_sector(self.N, S)
        m, mp = two(Sz), two(Sz_prime)
        if m < mp:
            return self.pi_basis_operator(S, Sz_prime, Sz).conj().T
        k = (m - mp) // 2
        op = self.projector(HalfInt(two_s), HalfInt(m))
        raise_op = np.eye(self.dim, dtype=complex)
        coeff = 1.0
        s = two_s / 2
        for step in range(k):
            mm = mp / 2 + step
            coeff *= math.sqrt(s * (s + 1) - mm * (mm + 1))
            raise_op = self.s_plus @ raise_op
        op = op @ raise_op @ self.projector(HalfInt(two_s), HalfInt(mp)) / coeff
        return op / dicke_degeneracy(self.N, HalfInt(two_s))


def operator_dump(matrix, S: SpinLike) -> dict:
    """Serializable record of a sector operator (nonzero entries only)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    entries = [
        [int(coo.row[i]), int(coo.col[i]), float(coo.data[i].real), float(coo.data[i].imag)]
        for i in order
        if coo.data[i] != 0
    ]
    return {"two_S": two(S), "ordering": ORDERING, "entries": entries}


def operator_load(payload: dict) -> sp.csr_matrix:
    if payload.get("ordering") != ORDERING:
        raise DomainError(f"unsupported basis ordering {payload.get('ordering')!r}")
    dim = int(payload["two_S"]) + 1
    rows, cols, vals = [], [], []
    for r, c, re, im in payload["entries"]:
        rows.append(r)
        cols.append(c)
        vals.append(complex(re, im))
    return sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim), dtype=complex)
