import math

import mpmath
import numpy as np
import pytest

from sigmoe.data import make_rng
from sigmoe.identifiability import (AtomParams, DegenerateClassError, DerivativeEntry, Mode, SingularConstantError,
                                    Verdict, build_derivative_class, evaluate_entry, independence_test,
                                    pde_residual_input_independent, pde_residual_polynomial, random_weak_atoms,
                                    slow_sequence_activation, slow_sequence_linear)
from sigmoe.model import Activation, MixingMeasure, regression_eval, sigmoid
from sigmoe.voronoi import l2_distance, loss_d2


def atom(d=2, seed=0):
    rng = np.random.default_rng(seed)
    return AtomParams(float(rng.normal()), rng.normal(size=d), rng.normal(size=d), float(rng.normal()))


class TestEnumeration:
    def test_weak_count(self):
        assert len(build_derivative_class(Activation.relu(), [atom()], Mode.WEAK)) == 6

    def test_strong_count(self):
        cls = build_derivative_class(Activation.gelu(), [atom()], Mode.STRONG)
        assert len(cls) == 26
        orders = [e.order for e in cls.entries if e.family == "strong"]
        assert orders.count(1) == 5 and orders.count(2) == 15

    @pytest.mark.parametrize("d", [1, 3, 5])
    def test_strong_count_general(self, d):
        q = d + 1
        cls = build_derivative_class(Activation.gelu(), [atom(d, 1), atom(d, 2)], Mode.STRONG)
        per_atom = (d + q) + (d + q) * (d + q + 1) // 2 + (d + 1 + q)
        assert len(cls) == 2 * per_atom
        assert len(set(cls.labels)) == len(cls)

    def test_strong_entries_sit_at_zero_slope(self):
        cls = build_derivative_class(Activation.relu(), [atom()], Mode.STRONG)
        for e in cls.entries:
            if e.family == "strong":
                assert not np.any(e.point.beta1)
            else:
                assert np.any(e.point.beta1)

    def test_duplicates_rejected(self):
        p = atom()
        with pytest.raises(ValueError):
            build_derivative_class(Activation.relu(), [p, p], Mode.WEAK)

    def test_labels(self):
        labels = build_derivative_class(Activation.identity(), [atom()], Mode.STRONG).labels
        assert "atom0:strong:d2F/dbeta1[0]db" in labels
        assert "atom0:weak:dF/da[1]" in labels
        assert "atom0:weak:dF/dbeta0" in labels


def mp_F(x, beta1, beta0, a, b):
    gate = 1 / (1 + mpmath.exp(-(mpmath.fsum(u * v for u, v in zip(beta1, x)) + beta0)))
    z = mpmath.fsum(u * v for u, v in zip(a, x)) + b
    return gate * z * mpmath.ncdf(z)


def mp_derivative(entry, x):
    """High-precision numerical derivative of F = sigmoid * GELU along the entry's coordinates."""
    p, d = entry.point, entry.point.d
    base = [*p.beta1, p.beta0, *p.a, p.b]
    orders = [0] * (2 * d + 2)
    for c in entry.coords:
        orders[c] += 1
    active = [c for c in range(2 * d + 2) if orders[c]]

    def f(*vals):
        theta = list(base)
        for c, v in zip(active, vals):
            theta[c] = v
        return mp_F(x, theta[:d], theta[d], theta[d + 1:2 * d + 1], theta[2 * d + 1])

    return mpmath.diff(f, [base[c] for c in active], [orders[c] for c in active])


def test_analytic_entries_match_high_precision_oracle():
    mpmath.mp.dps = 30
    rng = np.random.default_rng(7)
    cls = build_derivative_class(Activation.gelu(), [atom(2, 3)], Mode.STRONG)
    X = rng.uniform(-1, 1, size=(50, 2))
    for e in cls.entries:
        got = evaluate_entry(e, X, cls.activation)
        for x, g in zip(X, got):
            ref = float(mp_derivative(e, [mpmath.mpf(float(v)) for v in x]))
            assert abs(g - ref) <= 1e-6 * max(abs(ref), 1e-8), e.label


class TestIndependence:
    @pytest.mark.parametrize("act", [Activation.relu(), Activation.gelu(), Activation.identity()])
    def test_weak_generic_atoms_are_independent(self, act):
        rng = make_rng(0)
        for _ in range(20):
            atoms = random_weak_atoms(rng, 2, 4)
            rep = independence_test(build_derivative_class(act, atoms, Mode.WEAK), m=2000, rng=rng)
            assert rep.verdict is Verdict.INDEPENDENT
            assert rep.min_sv_ratio > 1e-3

    def test_strong_linear_is_dependent(self):
        rng = make_rng(1)
        atoms = random_weak_atoms(rng, 1, 2)
        rep = independence_test(build_derivative_class(Activation.polynomial(1), atoms, Mode.STRONG), rng=rng)
        assert rep.verdict is Verdict.DEPENDENT
        assert rep.min_sv_ratio < 1e-10
        assert any(any("d2F/dbeta1[" in s and s.endswith("db") for s in g) and
                   any(":strong:dF/da[" in s for s in g) for g in rep.dependent_subsets)

    def test_relu_second_derivatives_dropped(self):
        rng = make_rng(2)
        cls = build_derivative_class(Activation.relu(), random_weak_atoms(rng, 1, 2), Mode.STRONG)
        rep = independence_test(cls, rng=rng)
        assert rep.dropped_zero_columns
        assert all("d2F/da" in s or "d2F/db" in s for s in rep.dropped_zero_columns)

    def test_scale_robust(self):
        rng = make_rng(3)
        atoms = random_weak_atoms(rng, 2, 3)
        scaled = [AtomParams(p.beta0, p.beta1, 2 * p.a, 2 * p.b) for p in atoms]
        v1 = independence_test(build_derivative_class(Activation.gelu(), atoms), rng=make_rng(4)).verdict
        v2 = independence_test(build_derivative_class(Activation.gelu(), scaled), rng=make_rng(4)).verdict
        assert v1 == v2

    def test_sample_count_check(self):
        cls = build_derivative_class(Activation.gelu(), [atom()], Mode.STRONG)
        with pytest.raises(ValueError):
            independence_test(cls, m=3 * len(cls) - 1)

    def test_all_zero_class(self):
        # ReLU expert dead on the whole cube
        p = AtomParams(0.0, np.array([1.0, 0.0]), np.array([1.0, 1.0]), -5.0)
        with pytest.raises(DegenerateClassError):
            independence_test(build_derivative_class(Activation.relu(), [p]))

    def test_report_serialization(self):
        rep = independence_test(build_derivative_class(Activation.identity(), [atom()], Mode.STRONG))
        text = rep.to_text()
        assert "verdict: dependent" in text and "min_sv_ratio" in text
        rows = rep.singular_values_csv().splitlines()
        assert rows[0] == "index,singular_value,ratio"
        assert len(rows) == len(rep.singular_values) + 1


class TestPDE:
    def test_identity_example(self):
        X = np.random.default_rng(0).uniform(-1, 1, size=(100, 3))
        assert pde_residual_input_independent(Activation.identity(), 0.0, 1.0, X) < 1e-12

    def test_gelu_example(self):
        X = np.random.default_rng(1).uniform(-1, 1, size=(100, 3))
        assert pde_residual_input_independent(Activation.gelu(), 0.5, 0.3, X) < 1e-12

    def test_relu_flat_side(self):
        with pytest.raises(SingularConstantError):
            pde_residual_input_independent(Activation.relu(), 0.0, -0.5, np.zeros((1, 2)))

    def test_polynomial_identity_random(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            d = int(rng.integers(1, 5))
            X = rng.uniform(-1, 1, size=(20, d))
            args = (rng.normal(size=d), rng.normal(), rng.normal(size=d), rng.normal())
            assert pde_residual_polynomial(*args, X) < 1e-12
            assert pde_residual_polynomial(*args, 0.5 * X) < 1e-12

    def test_polynomial_sides_value(self):
        pt = AtomParams(0.0, np.zeros(1), np.array([0.7]), 0.2)
        x = np.array([[1.0]])
        lhs = evaluate_entry(DerivativeEntry(0, "weak", (0, 3), pt, ""), x, Activation.identity())
        rhs = evaluate_entry(DerivativeEntry(0, "weak", (1, 2), pt, ""), x, Activation.identity())
        assert lhs[0] == rhs[0] == 0.25


def slow_truth(act, seed=0, d=3, k=3):
    rng = np.random.default_rng(seed)
    beta1 = rng.normal(size=(k, d))
    a = rng.normal(size=(k, d))
    beta1[0] = 0.0
    a[0] = 0.0
    return MixingMeasure(rng.normal(size=k), beta1, a, rng.normal(size=k), activation=act)


class TestSlowSequences:
    @pytest.mark.parametrize("r", [1, 2])
    def test_linear_residual(self, r):
        G = slow_truth(Activation.identity())
        X = np.random.default_rng(5).uniform(-1, 1, size=(1000, 3))
        for n in (10, 100, 1000):
            Gn = slow_sequence_linear(G, n, r)
            assert Gn.k == G.k + 1
            resid = regression_eval(Gn, X) - regression_eval(G, X)
            assert np.max(np.abs(resid - n ** -(r + 1) * G.b[0])) < 1e-12

    def test_linear_loss_close_form(self):
        G = slow_truth(Activation.identity())
        for r in (1, 2):
            for n in (10, 100, 1000):
                want = n ** -(r + 1) + 2 * n ** -r
                # float64 storage of the split gate bias limits the absolute accuracy
                assert loss_d2(slow_sequence_linear(G, n, r), G, r).total == pytest.approx(want, rel=1e-9)

    def test_linear_ratio_shrinks(self):
        G = slow_truth(Activation.identity(), seed=1)
        ratios = []
        for n in (10, 100):
            Gn = slow_sequence_linear(G, n, 1)
            ratios.append(l2_distance(Gn, G, 20_000, seed=2) / loss_d2(Gn, G, 1).total)
        assert ratios[0] / ratios[1] == pytest.approx(10, rel=0.05)

    @pytest.mark.parametrize("act", [Activation.gelu(), Activation.relu(), Activation.identity()])
    def test_activation_weights_and_residual(self, act):
        G = slow_truth(act, seed=2)
        X = np.random.default_rng(6).uniform(-1, 1, size=(1000, 3))
        s_star = float(sigmoid(G.beta0[0]))
        for n in (10, 100, 1000):
            Gn = slow_sequence_activation(G, n, 1.0)
            assert abs(float(sigmoid(Gn.beta0[0]) + sigmoid(Gn.beta0[1])) - s_star) < 1e-14
            b = G.b[0]
            want = s_star / 2 * (act(b + 1 / n) + act(b + 2 / n) - 2 * act(b))
            resid = regression_eval(Gn, X) - regression_eval(G, X)
            assert np.max(np.abs(resid - want)) < 1e-12

    def test_activation_residual_first_order(self):
        G = slow_truth(Activation.gelu(), seed=3)
        x = np.zeros((1, 3))
        r1, r2 = (float(regression_eval(slow_sequence_activation(G, n, 1.0), x)[0] - regression_eval(G, x)[0])
                  for n in (1000, 2000))
        assert r1 / r2 == pytest.approx(2.0, rel=0.01)

    def test_preconditions(self):
        G = slow_truth(Activation.identity()).replace(a=np.ones((3, 3)))
        with pytest.raises(ValueError):
            slow_sequence_linear(G, 10)
        with pytest.raises(ValueError):
            slow_sequence_activation(G, 10)
        with pytest.raises(ValueError):
            slow_sequence_linear(slow_truth(Activation.identity()), 10, 0.5)


def test_random_weak_atoms_shape():
    atoms = random_weak_atoms(make_rng(0), 3, 4)
    assert len(atoms) == 3
    for p in atoms:
        assert p.beta1.shape == (4,) and 1.5 <= np.linalg.norm(p.beta1) <= 2.5
        assert -1 <= p.beta0 <= 1 and abs(p.b) <= 0.25 * np.abs(p.a).sum()
    assert math.isfinite(atoms[0].b)
