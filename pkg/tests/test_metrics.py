"""Tests for generation metrics, Tanimoto similarity and Sinkhorn transport."""

import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from osc_agent.errors import EmptySet, NoValidMolecules, NumericalDivergence, RangeError, WidthMismatch
from osc_agent.fingerprints import Fingerprint, morgan_fingerprint
from osc_agent.metrics import (
    GenerationSet,
    Prediction,
    SinkhornConfig,
    TransportProblem,
    avg_pce,
    cost_matrix,
    evaluate_generation,
    novelty,
    sinkhorn_distance,
    tanimoto,
    uniqueness,
    validity_rate,
    wasserstein_similarity,
)
from osc_agent.smiles import canonical_smiles, parse_smiles


def make_fp(on_bits, width=64):
    bits = np.zeros(width, dtype=bool)
    bits[list(on_bits)] = True
    return Fingerprint(bits=bits, width=width, kind="morgan", radius_or_maxlen=2)


def uniform_problem(cost):
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    return TransportProblem(cost=cost, p=np.full(n, 1.0 / n), q=np.full(m, 1.0 / m))


def exact_transport(cost):
    """Exact optimal transport cost by linear programming."""
    n, m = cost.shape
    a_eq = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i, :] = 1
        a_eq.append(row.ravel())
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        a_eq.append(col.ravel())
    b_eq = [1.0 / n] * n + [1.0 / m] * m
    result = linprog(cost.ravel(), A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    return result.fun


# 20-molecule toy generated set: (SMILES, PCE, SAscore)
TOY_GENERATED = [
    ("c1ccccc1", 3.0, 1.0),
    ("C1=CC=CC=C1", 3.0, 1.0),
    ("CCO", 0.5, 1.0),
    ("OCC", 0.5, 1.0),
    ("c1ccsc1", 11.0, 2.0),
    ("c1ccc2nsnc2c1", 12.5, 2.5),
    ("N#CC(C#N)=C1C(=O)c2ccccc2C1=O", 14.0, 3.0),
    ("CCCCCCCCc1ccc(-c2ccc(-c3cccs3)s2)s1", 10.0, 2.6),
    ("Cn1c2ccccc2c2ccccc21", 15.0, 8.0),
    ("FC(F)(F)c1ccc(C#N)cc1", 10.5, 7.9),
    ("c1ccc2ccccc2c1", 9.9, 1.5),
    ("C1CC", 20.0, 1.0),
    ("c1ccc1", 20.0, 1.0),
    ("CC(=O)O", 1.0, 1.0),
    ("c1ccncc1", 2.0, 1.2),
    ("c1cc[nH]c1", 12.0, 1.9),
    ("O=C1c2ccccc2C(=O)N1C", 13.0, 2.2),
    ("C1CCC2(CC1)CCCC2", 4.0, 3.0),
    ("C1CC2CCC1C2", 4.0, 3.5),
    ("CC(C)CO", 0.4, 1.1),
]


@pytest.fixture
def toy_set():
    return GenerationSet.from_smiles(
        [s for s, _, _ in TOY_GENERATED], [Prediction(p, sa) for _, p, sa in TOY_GENERATED]
    )


class TestTanimoto:
    def test_identical(self):
        fp = make_fp([1, 5, 9])
        assert tanimoto(fp, fp) == 1.0

    def test_disjoint(self):
        assert tanimoto(make_fp([1, 2]), make_fp([3, 4])) == 0.0

    def test_counts(self):
        # a=3, b=2, c=1
        assert tanimoto(make_fp([1, 2, 3]), make_fp([3, 4])) == pytest.approx(0.25)

    def test_all_zero(self):
        assert tanimoto(make_fp([]), make_fp([])) == 1.0
        assert tanimoto(make_fp([]), make_fp([1])) == 0.0

    def test_width_mismatch(self):
        with pytest.raises(WidthMismatch):
            tanimoto(make_fp([1], 64), make_fp([1], 128))

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(0)
        fps = [make_fp(np.flatnonzero(rng.random(64) < 0.3)) for _ in range(12)]
        for x, y, z in itertools.combinations(fps, 3):
            assert tanimoto(x, y) == tanimoto(y, x)
            d = lambda u, v: 1.0 - tanimoto(u, v)
            assert d(x, z) <= d(x, y) + d(y, z) + 1e-12


class TestGenerationCounts:
    def test_uniqueness_example(self):
        assert uniqueness(GenerationSet.from_smiles(["CCO", "OCC", "C"])) == pytest.approx(2 / 3)

    def test_uniqueness_extremes(self):
        assert uniqueness(GenerationSet.from_smiles(["C", "CC", "CCC"])) == 1.0
        assert uniqueness(GenerationSet.from_smiles(["CCO"] * 4)) == pytest.approx(0.25)

    def test_unparsable_compared_by_text(self):
        assert uniqueness(GenerationSet.from_smiles(["C1CC", "C1CC", "xx"])) == pytest.approx(2 / 3)

    def test_novelty(self):
        g = GenerationSet.from_smiles(["CCO", "c1ccccc1"])
        assert novelty(g, {canonical_smiles("OCC")}) == 0.5
        assert novelty(g, set()) == 1.0
        assert novelty(g, {canonical_smiles("CCO"), canonical_smiles("C1=CC=CC=C1")}) == 0.0

    def test_novelty_counts_instances(self):
        g = GenerationSet.from_smiles(["CCO", "CCO", "C"])
        assert novelty(g, {"C"}) == pytest.approx(2 / 3)

    def test_unparsable_is_never_novel(self):
        assert novelty(GenerationSet.from_smiles(["C1CC"]), set()) == 0.0

    def test_empty_set(self):
        empty = GenerationSet.from_smiles([])
        for metric in (uniqueness, validity_rate):
            with pytest.raises(EmptySet):
                metric(empty)
        with pytest.raises(EmptySet):
            novelty(empty, set())


class TestValidity:
    def test_example(self):
        g = GenerationSet.from_smiles(
            ["CCO", "CCC", "CCCC", "C1CC"],
            [Prediction(12, 5), Prediction(9, 4), Prediction(15, 9), None],
        )
        assert validity_rate(g) == 0.25

    def test_thresholds_are_strict(self):
        g = GenerationSet.from_smiles(["CCO", "CCC"], [Prediction(10.0, 2.0), Prediction(12.0, 8.0)])
        assert validity_rate(g) == 0.0

    def test_missing_prediction_is_invalid(self, caplog):
        g = GenerationSet.from_smiles(["CCO", "CCC"], [Prediction(12.0, 2.0), None])
        assert validity_rate(g) == 0.5
        assert "no prediction" in caplog.text

    def test_toy_set(self, toy_set):
        # passing: thiophene, thiadiazole, dicyanovinyl, trifluoro, pyrrole, phthalimide
        assert validity_rate(toy_set) == pytest.approx(6 / 20)

    def test_disconnected_is_invalid(self):
        g = GenerationSet.from_smiles(["CCO.C", "CCO"], [Prediction(12.0, 2.0), Prediction(12.0, 2.0)])
        assert not g.molecules[0].parsed
        assert g.molecules[0].error.startswith("DisconnectedMolecule")
        assert validity_rate(g) == 0.5
        assert avg_pce(GenerationSet.from_smiles(["CCO"], [Prediction(12.0, 2.0)])) == 12.0
        with pytest.raises(NoValidMolecules):
            avg_pce(GenerationSet.from_smiles(["CCO.C"], [Prediction(12.0, 2.0)]))


class TestAvgPce:
    def test_mean_of_valid(self):
        g = GenerationSet.from_smiles(["CCO", "CCC"], [Prediction(10.5, 2), Prediction(13.5, 2)])
        assert avg_pce(g) == pytest.approx(12.0)

    def test_single(self):
        assert avg_pce(GenerationSet.from_smiles(["CCO"], [Prediction(11.3, 2)])) == pytest.approx(11.3)

    def test_invalid_ignored(self):
        g = GenerationSet.from_smiles(["CCO", "CCC", "C1CC"], [Prediction(14, 2), Prediction(5, 2), Prediction(30, 1)])
        assert avg_pce(g) == pytest.approx(14.0)

    def test_order_invariant(self, toy_set):
        reversed_set = GenerationSet(toy_set.molecules[::-1], toy_set.predictions[::-1])
        assert avg_pce(reversed_set) == pytest.approx(avg_pce(toy_set))

    def test_no_valid(self):
        with pytest.raises(NoValidMolecules):
            avg_pce(GenerationSet.from_smiles(["CCO"], [Prediction(1, 2)]))


class TestCostMatrix:
    def test_identical_singletons(self):
        fp = make_fp([1, 2])
        assert cost_matrix([fp], [fp]).cost.tolist() == [[0.0]]

    def test_disjoint_singletons(self):
        assert cost_matrix([make_fp([1])], [make_fp([2])]).cost.tolist() == [[1.0]]

    def test_bounds_and_marginals(self):
        rng = np.random.default_rng(1)
        gen = [make_fp(np.flatnonzero(rng.random(64) < 0.2)) for _ in range(5)]
        ref = [make_fp(np.flatnonzero(rng.random(64) < 0.2)) for _ in range(3)]
        tp = cost_matrix(gen, ref)
        assert tp.cost.shape == (5, 3)
        assert tp.cost.min() >= 0 and tp.cost.max() <= 1
        assert tp.p.sum() == pytest.approx(1.0)
        assert tp.q.sum() == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(EmptySet):
            cost_matrix([], [make_fp([1])])

    def test_mixed_widths(self):
        with pytest.raises(WidthMismatch):
            cost_matrix([make_fp([1], 64)], [make_fp([1], 128)])


class TestSinkhorn:
    def test_identity_matching(self):
        plan = sinkhorn_distance(uniform_problem([[0, 1], [1, 0]]))
        assert plan.distance == pytest.approx(0.0, abs=5e-3)
        assert plan.converged

    def test_two_by_two_oracle(self):
        cost = [[0.2, 0.5], [0.6, 0.1]]
        # the two permutation couplings cost 0.15 and 0.55
        exact = min(0.5 * (0.2 + 0.1), 0.5 * (0.5 + 0.6))
        assert exact == pytest.approx(0.15)
        plan = sinkhorn_distance(uniform_problem(cost))
        assert plan.distance == pytest.approx(0.15, abs=5e-3)

    def test_single_cell(self):
        plan = sinkhorn_distance(uniform_problem([[0.37]]))
        assert plan.distance == 0.37

    def test_plan_marginals(self):
        cost = np.array([[0.2, 0.5, 0.9], [0.6, 0.1, 0.3]])
        plan = sinkhorn_distance(uniform_problem(cost))
        assert plan.coupling.min() >= 0
        assert np.allclose(plan.coupling.sum(axis=1), [0.5, 0.5], atol=1e-6)
        assert np.allclose(plan.coupling.sum(axis=0), [1 / 3] * 3, atol=1e-6)
        assert plan.distance == pytest.approx(float((plan.coupling * cost).sum()))

    @pytest.mark.parametrize("n,m", [(2, 2), (2, 3), (3, 3), (3, 4), (4, 4), (4, 2)])
    def test_matches_exact_transport(self, n, m):
        rng = np.random.default_rng(100 * n + m)
        for _ in range(5):
            cost = rng.random((n, m))
            plan = sinkhorn_distance(uniform_problem(cost))
            assert abs(plan.distance - exact_transport(cost)) < 5e-3

    def test_distance_shrinks_with_epsilon(self):
        rng = np.random.default_rng(5)
        cost = rng.random((3, 3))
        values = [sinkhorn_distance(uniform_problem(cost), SinkhornConfig(epsilon=e)).distance for e in (0.1, 0.01, 0.005)]
        assert values[0] >= values[1] - 1e-5
        assert values[1] >= values[2] - 1e-5

    def test_not_converged_is_reported(self):
        plan = sinkhorn_distance(uniform_problem([[0.2, 0.5, 0.9], [0.6, 0.1, 0.3]]), SinkhornConfig(max_iterations=1, marginal_tolerance=1e-15))
        assert not plan.converged
        assert plan.iterations_used == 1

    def test_divergence(self):
        # underflows every kernel entry when epsilon is absurdly small
        with pytest.raises(NumericalDivergence):
            sinkhorn_distance(uniform_problem([[0.5, 0.7], [0.9, 0.6]]), SinkhornConfig(epsilon=1e-320))


class TestWassersteinSimilarity:
    def test_values(self):
        assert wasserstein_similarity(0.0) == 1.0
        assert wasserstein_similarity(0.15) == pytest.approx(0.85)
        assert wasserstein_similarity(1.0) == 0.0

    def test_range(self):
        with pytest.raises(RangeError):
            wasserstein_similarity(1.1)
        with pytest.raises(RangeError):
            wasserstein_similarity(-0.5)

    def test_identical_sets(self):
        fps = [morgan_fingerprint(parse_smiles(s)) for s in ("CCO", "c1ccccc1", "c1ccsc1", "CC(=O)O")]
        plan = sinkhorn_distance(cost_matrix(fps, fps))
        assert wasserstein_similarity(plan.distance) >= 0.999


class TestEvaluateGeneration:
    def test_report(self, toy_set):
        fps = [morgan_fingerprint(m.graph) for m in toy_set.molecules if m.parsed]
        result = evaluate_generation(toy_set, {canonical_smiles("CCO")}, fps, fps)
        assert result["n_generated"] == 20
        assert result["n_parsed"] == 18
        # benzene written twice, ethanol written twice
        assert result["uniqueness"] == pytest.approx(18 / 20)
        assert result["novelty"] == pytest.approx(16 / 20)
        assert result["validity"] == pytest.approx(6 / 20)
        assert result["wasserstein_similarity"] >= 0.99
        assert result["avg_pce"] == pytest.approx((11.0 + 12.5 + 14.0 + 10.5 + 12.0 + 13.0) / 6)

    def test_without_fingerprints(self, toy_set):
        result = evaluate_generation(toy_set, set())
        assert result["wasserstein_similarity"] is None
        assert result["mean_tanimoto"] is None
