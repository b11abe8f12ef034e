import time
from itertools import combinations

import numpy as np
import pytest

from nidglm import nid
from nidglm.cann import NnWeights
from nidglm.data import EMBEDDING, ONEHOT, SCALED, EncodedColumn


def _random_net(rng, q0=None, depth=None):
    q0 = q0 or int(rng.integers(2, 7))
    depth = depth or int(rng.integers(1, 4))
    sizes = [q0] + [int(rng.integers(1, 6)) for _ in range(depth)]
    W = [rng.normal(size=(sizes[l + 1], sizes[l])) for l in range(depth)]
    w_y = rng.normal(size=sizes[-1])
    return W, w_y


def _path_influence(W, w_y):
    """Sum over every path from a first-layer neuron to the output of the
    product of absolute weights, enumerated one path at a time."""
    depth = len(W)

    def paths_from(layer, j):
        # absolute path weight sum from neuron j of hidden layer `layer` (1-based)
        if layer == depth:
            return abs(w_y[j])
        return sum(abs(W[layer][k, j]) * paths_from(layer + 1, k) for k in range(W[layer].shape[0]))

    return np.array([paths_from(1, j) for j in range(W[0].shape[0])])


def _brute_scores(W, w_y, surrogate):
    zeta = _path_influence(W, w_y)
    A = np.abs(W[0])
    out = {}
    for a, b in combinations(range(A.shape[1]), 2):
        total = 0.0
        for j in range(A.shape[0]):
            wa, wb = A[j, a], A[j, b]
            mu = min(wa, wb) if surrogate == "min" else (2 * wa * wb / (wa + wb) if wa + wb > 0 else 0.0)
            total += zeta[j] * mu
        out[(a, b)] = total
    return out


class TestOracle:
    @pytest.mark.parametrize("surrogate", nid.SURROGATES)
    def test_matches_path_enumeration(self, surrogate):
        rng = np.random.default_rng(2024)
        for _ in range(150):
            W, w_y = _random_net(rng)
            zeta = nid.influence((W, w_y))
            np.testing.assert_allclose(zeta, _path_influence(W, w_y), rtol=1e-10, atol=1e-12)
            brute = _brute_scores(W, w_y, surrogate)
            got = {(p.input_index_1, p.input_index_2): p.score for p in nid.pair_scores((W, w_y), surrogate)}
            assert got.keys() == brute.keys()
            for k in brute:
                assert got[k] == pytest.approx(brute[k], rel=1e-10, abs=1e-12)

    def test_hand_example(self):
        # one first-layer neuron with incoming weights 2 and 3 and influence 5
        W = [np.array([[2.0, -3.0]]), np.array([[5.0]])]
        w_y = np.array([1.0])
        assert nid.influence((W, w_y))[0] == 5.0
        (pair,) = nid.pair_scores((W, w_y))
        assert pair.score == 10.0
        assert nid.pair_scores((W, w_y), "harmonic_mean")[0].score == pytest.approx(5 * 2 * 2 * 3 / 5)

    def test_accepts_weight_objects(self):
        W = [np.array([[1.0, 2.0, 0.5]]), np.array([[3.0]])]
        w = NnWeights([], W, [np.zeros(1), np.zeros(1)], np.array([-2.0]), 0.4)
        S = nid.score_matrix(w)
        assert S[0, 1] == 6.0 and S[1, 2] == 3.0 and S[0, 2] == 3.0
        assert np.all(np.diag(S) == 0) and np.array_equal(S, S.T)

    def test_biases_play_no_part(self):
        rng = np.random.default_rng(0)
        W, w_y = _random_net(rng, 4, 2)
        a = NnWeights([], W, [np.zeros(w.shape[0]) for w in W], w_y, 0.0)
        b = NnWeights([], W, [rng.normal(size=w.shape[0]) for w in W], w_y, 3.0)
        assert np.array_equal(nid.score_matrix(a), nid.score_matrix(b))

    def test_unused_input_has_zero_strength(self):
        W, w_y = _random_net(np.random.default_rng(1), 4, 2)
        W[0][:, 2] = 0.0
        S = nid.score_matrix((W, w_y))
        assert np.all(S[2] == 0)

    def test_shape_mismatch(self):
        W = [np.ones((3, 2)), np.ones((2, 4))]
        with pytest.raises(ValueError):
            nid.influence((W, np.ones(2)))


class TestAggregation:
    COLMAP = [EncodedColumn("x1", SCALED), EncodedColumn("f", ONEHOT, 0), EncodedColumn("f", ONEHOT, 1),
              EncodedColumn("g", EMBEDDING, 0), EncodedColumn("g", EMBEDDING, 1)]

    def _scores(self):
        S = np.arange(25, dtype=float).reshape(5, 5)
        S = S + S.T
        return [nid.NeuronPairScore(a, b, S[a, b]) for a, b in combinations(range(5), 2)]

    @pytest.mark.parametrize("how,expected", [("min", 0 + 5 + 0 + 5), ("max", 0), ("mean", 0)])
    def test_reductions(self, how, expected):
        agg = {(s.feature_1, s.feature_2): s.score for s in nid.aggregate(self._scores(), self.COLMAP, how)}
        # S[a, b] = 6 (a + b) with rows a, b; x1-f pairs are (0,1), (0,2)
        assert set(agg) == {("x1", "f"), ("x1", "g"), ("f", "g")}
        x1_f = {"min": 6.0, "max": 12.0, "mean": 9.0}[how]
        f_g = {"min": 24.0, "max": 36.0, "mean": 30.0}[how]
        assert agg[("x1", "f")] == x1_f
        assert agg[("f", "g")] == f_g

    def test_pairs_within_one_feature_are_dropped(self):
        agg = nid.aggregate(self._scores(), self.COLMAP)
        assert all(s.feature_1 != s.feature_2 for s in agg)

    def test_unmapped_index(self):
        with pytest.raises(ValueError):
            nid.aggregate([nid.NeuronPairScore(0, 9, 1.0)], ["a", "b"])


class TestRanking:
    def test_order_and_ties(self):
        s = [nid.FeaturePairScore("x2", "x3", 1.0), nid.FeaturePairScore("x1", "x9", 1.0),
             nid.FeaturePairScore("x4", "x5", 5.0)]
        r = nid.rank(s)
        assert [(x.feature_1, x.feature_2) for x in r] == [("x4", "x5"), ("x1", "x9"), ("x2", "x3")]
        assert len(nid.rank(s, top_k=10)) == 3
        with pytest.raises(ValueError):
            nid.rank(s, top_k=0)

    def test_csv_round_trip(self, tmp_path):
        s = nid.rank([nid.FeaturePairScore("a", "b", 0.1 + 0.2), nid.FeaturePairScore("a", "c", 1 / 3)])
        nid.write_ranking(s, tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "rank,feature_1,feature_2,score"
        back = nid.read_ranking(tmp_path / "r.csv")
        assert [(x.feature_1, x.feature_2, x.score) for x in back] == [(x.feature_1, x.feature_2, x.score) for x in s]


def test_speed_on_default_architecture():
    rng = np.random.default_rng(0)
    sizes = [13, 20, 15, 10]
    W = [rng.normal(size=(sizes[l + 1], sizes[l])) for l in range(3)]
    w_y = rng.normal(size=10)
    start = time.perf_counter()
    scores = nid.pair_scores((W, w_y))
    elapsed = time.perf_counter() - start
    assert len(scores) == 13 * 12 // 2
    assert elapsed < 1.0
