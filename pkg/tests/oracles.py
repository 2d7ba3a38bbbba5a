"""Independent reference implementations used only by the tests."""

import numpy as np

from spincount.spinspace import HalfInt, ProductSpace, allowed_two_s


def lindblad_apply(H, jumps, X):
    """``-i[H, X] + sum_k (L X L^+ - {L^+ L, X}/2)`` by plain matrix algebra."""
    out = -1j * (H @ X - X @ H)
    for L in jumps:
        Ld = L.conj().T
        out += L @ X @ Ld - 0.5 * (Ld @ L @ X + X @ Ld @ L)
    return out


def product_lindbladian(N, omega, kappa, gamma):
    """Dense superoperator on the full ``2**N`` space, column stacking."""
    ps = ProductSpace(N)
    H = omega * ps.s_x
    jumps = [np.sqrt(kappa) * ps.s_minus] + [np.sqrt(gamma) * s for s in ps.local_minus]
    d = ps.dim
    eye = np.eye(d)
    L = -1j * (np.kron(eye, H) - np.kron(H.T, eye))
    for J in jumps:
        JdJ = J.conj().T @ J
        L += np.kron(J.conj(), J) - 0.5 * (np.kron(eye, JdJ) + np.kron(JdJ.T, eye))
    return ps, L


class PiMap:
    """Maps between the folded Dicke representation and full density matrices."""

    def __init__(self, N):
        self.ps = ProductSpace(N)
        self.N = N
        self.units = {}
        for t in allowed_two_s(N):
            for a in range(t + 1):
                for b in range(t + 1):
                    m, mp = t - 2 * a, t - 2 * b
                    self.units[(t, a, b)] = self.ps.pi_basis_operator(HalfInt(t), HalfInt(m), HalfInt(mp))

    def to_full(self, blocks):
        d = self.ps.dim
        X = np.zeros((d, d), dtype=complex)
        for (t, a, b), B in self.units.items():
            X += blocks[(t, t)][a, b] * B
        return X

    def from_full(self, X):
        out = {}
        for t in allowed_two_s(self.N):
            blk = np.zeros((t + 1, t + 1), dtype=complex)
            for a in range(t + 1):
                for b in range(t + 1):
                    B = self.units[(t, a, b)]
                    # the units are Hilbert-Schmidt orthogonal
                    blk[a, b] = np.trace(B.conj().T @ X) / np.trace(B.conj().T @ B).real
            out[(t, t)] = blk
        return out


def random_density(rng, d):
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real
