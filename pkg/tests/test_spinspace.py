import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spincount.errors import DomainError
from spincount.spinspace import (
    DickeSpace,
    HalfInt,
    ProductSpace,
    SectorBasis,
    allowed_two_s,
    build_sector_ops,
    check_sector,
    dicke_degeneracy,
    jump_rates,
    ladder_coefficients,
    max_jump_rate_factor,
    operator_dump,
    operator_load,
)

two_s = st.integers(min_value=0, max_value=40)


def test_halfint_parsing_and_printing():
    assert HalfInt.of("5/2") == HalfInt(5)
    assert HalfInt.of(Fraction(5, 2)) == HalfInt(5)
    assert HalfInt.of(2.5) == HalfInt(5)
    assert HalfInt.of(3) == HalfInt(6)
    assert str(HalfInt(5)) == "5/2" and str(HalfInt(6)) == "3"
    assert HalfInt(3) < HalfInt(4)
    with pytest.raises(DomainError):
        HalfInt.of(0.3)


def test_sector_membership_rules():
    assert check_sector(4, 2) == 4
    assert check_sector(5, "1/2") == 1
    for N, S in [(4, "1/2"), (3, 1), (4, 3)]:
        with pytest.raises(DomainError):
            check_sector(N, S)
    with pytest.raises(DomainError):
        SectorBasis(HalfInt(2)).index(2)


@given(two_s)
def test_angular_momentum_algebra(t):
    ops = build_sector_ops(HalfInt(t))
    sp_, sm, sz = ops.dense("s_plus"), ops.dense("s_minus"), ops.dense("s_z")
    s = t / 2
    np.testing.assert_allclose(sp_ @ sm - sm @ sp_, 2 * sz, atol=1e-10)
    casimir = ops.dense("s_x") @ ops.dense("s_x") + ops.dense("s_y") @ ops.dense("s_y") + sz @ sz
    np.testing.assert_allclose(casimir, s * (s + 1) * np.eye(t + 1), atol=1e-9)
    np.testing.assert_allclose(ops.dense("s_plus_s_minus"), sp_ @ sm, atol=1e-10)
    # descending Sz ordering
    assert np.all(np.diff(np.diag(sz).real) < 0)


@given(two_s)
def test_ladder_coefficients_closed_form(t):
    s = t / 2
    ms = [s - 1 - k for k in range(t)]  # S+ |m> coefficients for m = s-1, ..., -s
    expect = [math.sqrt(s * (s + 1) - m * (m + 1)) for m in ms]
    np.testing.assert_allclose(np.sort(ladder_coefficients(t)), np.sort(expect), rtol=1e-12)


@given(two_s)
def test_max_jump_rate_factor_is_top_eigenvalue(t):
    vals = np.linalg.eigvalsh(build_sector_ops(HalfInt(t)).dense("s_plus_s_minus"))
    assert max_jump_rate_factor(HalfInt(t)) == pytest.approx(vals.max(), abs=1e-9)


@given(st.integers(min_value=1, max_value=60))
def test_dicke_degeneracy_counts_states(N):
    assert sum(d * (s.twice_value + 1) for s, d in DickeSpace(N).sectors) == 2**N
    for t in allowed_two_s(N):
        k = (N - t) // 2
        # multiplicity of spin S = binom(N, N/2-S) - binom(N, N/2-S-1)
        assert dicke_degeneracy(N, HalfInt(t)) == math.comb(N, k) - (math.comb(N, k - 1) if k > 0 else 0)


def test_known_degeneracies():
    assert dicke_degeneracy(4, 2) == 1
    assert dicke_degeneracy(4, 1) == 3
    assert dicke_degeneracy(4, 0) == 2
    assert DickeSpace(20).n_elements == sum((t + 1) ** 2 for t in range(0, 21, 2))


def test_jump_rates():
    r = jump_rates(4, 2, -2, kappa=1.0, gamma=0.1)
    assert r.collective == 0.0 and r.ratio is None and r.local == 0.0
    r = jump_rates(4, 2, 2, kappa=1.0, gamma=0.1)
    assert r.collective == pytest.approx(4.0) and r.local == pytest.approx(0.4)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_product_space_projectors(N):
    ps = ProductSpace(N)
    total = sum(ps.projector(HalfInt(t)) for t in allowed_two_s(N))
    np.testing.assert_allclose(total, np.eye(2**N), atol=1e-10)
    for t in allowed_two_s(N):
        P = ps.projector(HalfInt(t))
        assert np.trace(P).real == pytest.approx(dicke_degeneracy(N, HalfInt(t)) * (t + 1))
        # the compressed basis unit has unit trace on its diagonal element
        B = ps.pi_basis_operator(HalfInt(t), HalfInt(t), HalfInt(t))
        assert np.trace(B).real == pytest.approx(1.0)


def test_product_space_limit():
    with pytest.raises(DomainError):
        ProductSpace(7)


@given(two_s)
def test_operator_dump_roundtrip(t):
    op = build_sector_ops(HalfInt(t)).s_minus
    payload = json.loads(json.dumps(operator_dump(op, HalfInt(t))))
    np.testing.assert_array_equal(operator_load(payload).toarray(), op.toarray())
