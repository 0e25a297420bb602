import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsimclr.mi_oracle import (BoundCheck, DiscreteJoint, chain_rule_residual, exact_mi,
                                 format_report, label_skew_joint, optimal_critic, posterior,
                                 random_classifier, random_joint, random_label_skew_joint,
                                 validate_infonce_bound, validate_prop2, validate_uv_bounds,
                                 write_report)
from fedsimclr.numerics import ConfigurationError, derive_rng

sizes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


def test_mi_examples():
    indep = DiscreteJoint(np.outer([0.3, 0.7], [0.2, 0.5, 0.3]), ("a", "b"))
    assert abs(exact_mi(indep, "a", "b")) <= 1e-12
    copy = DiscreteJoint(np.diag([0.5, 0.5]), ("a", "b"))
    assert abs(exact_mi(copy, "a", "b") - math.log(2)) <= 1e-15
    with pytest.raises(ConfigurationError):
        exact_mi(copy, "a", "a")
    with pytest.raises(ConfigurationError):
        DiscreteJoint(np.full((2, 2), 0.3), ("a", "b"))


@given(sizes, st.integers(0, 2**32 - 1))
def test_mi_symmetric_nonnegative_and_chain_rule(shape, seed):
    j = random_joint(np.random.default_rng(seed), shape)
    i_ab = exact_mi(j, "z1", "z2")
    assert i_ab >= 0
    assert abs(i_ab - exact_mi(j, "z2", "z1")) <= 1e-12
    assert abs(chain_rule_residual(j)) <= 1e-10


def test_chain_rule_small_joint():
    j = random_joint(derive_rng(0), (2, 2, 2))
    assert abs(chain_rule_residual(j)) <= 1e-10


def test_infonce_k1_is_zero():
    j = random_joint(derive_rng(1), (2, 3, 3))
    est = validate_infonce_bound(j, np.ones((3, 3)), 1, 100, derive_rng(2))
    assert est.bound == 0.0 and est.holds
    with pytest.raises(ConfigurationError):
        validate_infonce_bound(j, np.ones((3, 3)), 0, 100, derive_rng(2))
    with pytest.raises(ConfigurationError):
        validate_infonce_bound(j, np.full((3, 3), np.inf), 2, 100, derive_rng(2))


def test_infonce_random_critics_hold():
    for i in range(20):
        rng = derive_rng(3, i)
        j = random_joint(rng, (3, 3, 4))
        est = validate_infonce_bound(j, 2 * rng.standard_normal((3, 3, 4)), 8, 1000, rng)
        assert est.holds and est.max_term <= math.log(8) + 1e-12


def test_optimal_critic_is_pointwise_mi():
    j = random_joint(derive_rng(4), (2, 3, 3))
    c = optimal_critic(j)
    p = j.probs
    expected = np.sum(p * c)
    assert abs(expected - exact_mi(j, "z1", "z2", "s")) < 1e-12


def test_marginal_examples():
    j = random_joint(derive_rng(5), (3, 4, 2))
    rep = validate_uv_bounds(j, posterior(j, "s", "z1"), posterior(j, "s", "z2"))
    assert abs(rep.marginal_gap) <= 1e-12
    with pytest.raises(ConfigurationError):
        validate_uv_bounds(j, posterior(j, "s", "z1"))
    # uniform p(s) with z1 still informative about s
    q = random_joint(derive_rng(6), (2, 3, 3)).probs
    q = q / q.sum(axis=(1, 2), keepdims=True) / 2
    j = DiscreteJoint(q, ("s", "z1", "z2"))
    rep = validate_uv_bounds(j, np.full((3, 2), 0.5))
    assert abs(rep.marginal_bound) <= 1e-12 and rep.marginal_holds
    with pytest.raises(ConfigurationError):
        validate_uv_bounds(j, np.full((3, 2), 0.6))


def test_uv_bounds_random_sweep():
    for i in range(20):
        rng = derive_rng(7, i)
        j = random_joint(rng, (3, 3, 3))
        for _ in range(5):
            rep = validate_uv_bounds(j, random_classifier(rng, 3, 3), random_classifier(rng, 3, 3))
            assert rep.marginal_holds and rep.conditional_holds


def test_prop2_deterministic_chain_is_tight():
    eye = np.eye(2)
    pz = np.zeros((2, 2, 2))
    pz[0, 0, 0] = pz[1, 1, 1] = 1.0
    j = label_skew_joint([0.5, 0.5], eye, pz)
    rep = validate_prop2(j, posterior(j, "s", "z1"), posterior(j, "s", "z2"))
    assert abs(rep.rhs - 2 * exact_mi(j, "z1", "s")) <= 1e-12
    assert abs(rep.lhs - 2 * math.log(2)) <= 1e-12
    assert rep.holds


def test_prop2_independent_labels_gives_nonpositive_rhs():
    rng = derive_rng(8)
    p_y = rng.dirichlet(np.ones(3))
    pz = rng.dirichlet(np.ones(9), size=3).reshape(3, 3, 3)
    j = label_skew_joint([0.4, 0.6], np.vstack([p_y, p_y]), pz)
    for _ in range(10):
        rep = validate_prop2(j, random_classifier(rng, 3, 2))
        assert rep.rhs <= 1e-12 and rep.holds


def test_prop2_random_and_precondition():
    for i in range(20):
        rng = derive_rng(9, i)
        j = random_label_skew_joint(rng)
        assert validate_prop2(j, random_classifier(rng, 4, 3), random_classifier(rng, 4, 3)).holds
    leaky = np.zeros((2, 1, 2, 2))
    leaky[0, 0, 0, 0] = leaky[1, 0, 1, 1] = 0.5
    with pytest.raises(ConfigurationError):
        validate_prop2(DiscreteJoint(leaky, ("s", "y", "z1", "z2")), np.full((2, 2), 0.5))


def test_report_format(tmp_path):
    checks = [BoundCheck("alpha", 1.0, 0.5, 0.5, True), BoundCheck("beta", 0.0, 1e-3, -1e-3, False)]
    text = format_report(checks)
    lines = text.splitlines()
    assert lines[0].split() == ["check", "true", "bound", "slack", "result"]
    assert lines[1].startswith("alpha") and lines[1].endswith("PASS")
    assert lines[2].endswith("FAIL") and "-0.001" in lines[2]
    assert lines[-1] == "1/2 checks passed"
    write_report(checks, tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text() == text
