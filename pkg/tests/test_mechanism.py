import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stiffinfer.mechanism import (MechanismParseError, MechanismValidationError, element_matrix,
                                  load_bundled, mechanism_to_yaml, parse_mechanism)
from stiffinfer.thermokin import Isothermal, RobertsonModel

NASA_N2 = """
- name: N2
  composition: {N: 2}
  thermo:
    model: NASA7
    temperature-ranges: [300.0, 1000.0, 5000.0]
    data:
    - [3.298677, 1.4082404e-03, -3.963222e-06, 5.641515e-09, -2.444854e-12, -1020.8999, 3.950372]
    - [2.92664, 1.4879768e-03, -5.68476e-07, 1.0097038e-10, -6.753351e-15, -922.7977, 5.980528]
"""


def _doc(species_block, reactions="", elements="[N]", names="[N2]"):
    return f"""
units: {{length: cm, time: s, quantity: mol, activation-energy: cal/mol}}
phases:
- name: gas
  thermo: ideal-gas
  elements: {elements}
  species: {names}
species:{species_block}
reactions:{reactions or " []"}
"""


def test_bundled_counts(mech):
    assert (mech.n_s, mech.n_e, mech.n_r) == (9, 3, 28)
    assert mech.species_names[-1] == "N2"


def test_single_species_no_reactions():
    m = parse_mechanism(_doc(NASA_N2))
    assert m.n_r == 0 and m.n_s == 1
    model = Isothermal(m, 1000.0)
    assert np.all(model.rhs(np.array([1.0])) == 0.0)


def _broken_h_doc(mech):
    text = mechanism_to_yaml(mech)
    # OH + H2 -> H + H2O with the product H dropped
    return text.replace("equation: OH + H2 <=> H + H2O", "equation: OH + H2 <=> H2O", 1)


def test_element_imbalance_names_element(mech):
    text = _broken_h_doc(mech)
    assert "OH + H2 <=> H2O" in text
    with pytest.raises(MechanismValidationError) as exc:
        parse_mechanism(text)
    assert exc.value.invariant == "element-balance"
    assert "element H" in str(exc.value)


def test_parse_error_has_line_context():
    text = _doc(NASA_N2).replace("thermo: ideal-gas", "thermo: ideal-gas\n  bogus: 1")
    with pytest.raises(MechanismParseError) as exc:
        parse_mechanism(text)
    assert exc.value.line is not None


def test_unsupported_rate_type_rejected(mech):
    text = mechanism_to_yaml(mech).replace("type: three-body", "type: pressure-dependent-Arrhenius", 1)
    with pytest.raises(MechanismParseError):
        parse_mechanism(text)


def test_round_trip(mech):
    again = parse_mechanism(mechanism_to_yaml(mech))
    assert again == mech


def test_element_matrix_rows_sum_to_one(mech):
    C = element_matrix(mech)
    assert C.shape == (9, 3)
    np.testing.assert_allclose(C.sum(axis=1), 1.0, atol=1e-14)
    assert np.linalg.matrix_rank(C) == 3


def test_robertson_element_matrix():
    np.testing.assert_array_equal(RobertsonModel().element_matrix(), np.ones((3, 1)))


def test_element_conservation_of_source(h2):
    C = h2.element_matrix()
    S = h2.model.rhs(h2.phi0)
    assert np.abs(C.T @ S).max() < 1e-12 * max(1.0, np.abs(S).max())


def test_stoichiometric_balance_exact(mech):
    nu_f, nu_r = mech.stoich
    comp = np.array([[sp.composition.get(e, 0) for e in mech.elements] for sp in mech.species])
    np.testing.assert_array_equal((nu_r - nu_f) @ comp, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9), st.floats(900.0, 2500.0))
def test_conservation_random_states(h2, logs, T):
    phi = h2.phi0 * np.exp(np.array(logs))
    phi /= phi.sum()
    model = Isothermal(h2.mechanism, T)
    S = model.rhs(phi)
    C = h2.element_matrix()
    assert np.abs(C.T @ S).max() <= 1e-10 * np.abs(S).max() + 1e-300
