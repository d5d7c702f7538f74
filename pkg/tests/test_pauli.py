from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rydstab.pauli import (
    PauliString,
    commutation_sign,
    commutation_transform,
    enumerate_paulis,
    from_pauli_coefficients,
    pauli_coefficients,
    restrict,
    symplectic_table,
    weight,
)

letters = st.text(alphabet="IXYZ", min_size=1, max_size=4)


def test_indexing_is_base4_lexicographic():
    names = [str(p) for p in enumerate_paulis(2)]
    assert names[:5] == ["II", "IX", "IY", "IZ", "XI"]
    assert PauliString("ZI").index == 12
    assert PauliString.from_index(12, 2) == PauliString("ZI")


def test_invalid_letters_rejected():
    with pytest.raises(ValueError):
        PauliString("IA")


def test_weight_and_restrict():
    assert weight("IXZI") == 2
    assert str(restrict("IXYZ", [1, 3])) == "XZ"


def test_commutation_examples():
    assert commutation_sign("X", "Z") == -1
    assert commutation_sign("XX", "ZZ") == 1
    assert commutation_sign("Y", "Y") == 1


@given(letters, st.data())
def test_commutation_matches_matrices(a, data):
    b = data.draw(st.text(alphabet="IXYZ", min_size=len(a), max_size=len(a)))
    pa, pb = PauliString(a).matrix(), PauliString(b).matrix()
    anti = np.allclose(pa @ pb, -pb @ pa)
    assert commutation_sign(a, b) == (-1 if anti else 1)


def test_symplectic_table_consistent():
    xt, zt = symplectic_table(2)
    for p in enumerate_paulis(2):
        for j, c in enumerate(str(p)):
            assert xt[p.index, j] == (c in "XY")
            assert zt[p.index, j] == (c in "YZ")


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_pauli_coefficients_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    op = rng.normal(size=(2**n, 2**n)) + 1j * rng.normal(size=(2**n, 2**n))
    coeffs = pauli_coefficients(op)
    assert np.allclose(from_pauli_coefficients(coeffs), op, atol=1e-12)
    direct = [np.trace(p.matrix() @ op) for p in enumerate_paulis(n)]
    assert np.allclose(coeffs, direct, atol=1e-12)


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_commutation_transform_is_involution_up_to_scale(n, seed):
    v = np.random.default_rng(seed).normal(size=4**n)
    assert np.allclose(commutation_transform(commutation_transform(v)) / 4**n, v, atol=1e-12)


def test_commutation_transform_matches_definition():
    v = np.arange(16.0)
    out = commutation_transform(v)
    paulis = enumerate_paulis(2)
    ref = [sum(commutation_sign(r, q) * v[r.index] for r in paulis) for q in paulis]
    assert np.allclose(out, ref)
