import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmea.encoders import ModalityEmbeddings
from cdmea.scoring import (
    FusionParams,
    causal_scores,
    fuse_scores,
    read_scores_tsv,
    score_matrix,
    similarity_score,
    write_scores_tsv,
)

finite = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)
phis = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)


def random_embeddings(rng, n, dims=(6, 9, 9)):
    def unit_rows(d):
        z = rng.standard_normal((n, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    return ModalityEmbeddings(*(unit_rows(d) for d in dims))


class TestSimilarity:
    def test_self_similarity(self):
        z = np.array([0.6, 0.8])
        assert similarity_score(z, z) == pytest.approx(1.0)

    def test_zero_row_scores_zero(self):
        assert similarity_score(np.array([0.6, 0.8]), np.zeros(2)) == 0.0

    def test_hand_value(self):
        a = np.array([1.0, 0.0])
        b = np.array([1.0, 1.0]) / math.sqrt(2)
        assert similarity_score(a, b) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            similarity_score(np.zeros(3), np.zeros(4))


class TestFusion:
    def test_uniform_weights_mean(self):
        got = fuse_scores(0.9, 0.6, 0.3, FusionParams.uniform())
        assert got == pytest.approx(0.6, abs=1e-12)

    def test_visual_only_world(self):
        params = FusionParams(0.3, -0.2, 1.1)
        w_v, _, _ = params.weights()
        got = fuse_scores(0.9, 0.6, 0.3, params, blocked={"g", "m"})
        assert got == pytest.approx(w_v * 0.9, abs=1e-12)

    def test_all_blocked_world_is_zero(self):
        assert fuse_scores(0.9, 0.6, 0.3, FusionParams.uniform(), blocked={"v", "g", "m"}) == 0.0

    def test_unknown_branch_rejected(self):
        with pytest.raises(ValueError):
            fuse_scores(0.1, 0.2, 0.3, FusionParams.uniform(), blocked={"x"})

    @given(phis, phis, phis)
    def test_weights_sum_to_one(self, a, b, c):
        w = FusionParams(a, b, c).weights()
        assert sum(w) == pytest.approx(1.0, abs=1e-9)
        assert all(x > 0 for x in w)


class TestCausalScores:
    def test_beta_zero_is_total_effect(self):
        cs = causal_scores(0.9, 0.6, 0.3, FusionParams.uniform(), beta=0.0)
        assert cs.tie == cs.te == cs.y_factual

    def test_hand_arithmetic(self):
        cs = causal_scores(0.9, 0.6, 0.3, FusionParams.uniform(), beta=0.2)
        assert cs.y_factual == pytest.approx(0.6, abs=1e-12)
        assert cs.y_counterfactual == pytest.approx(0.3, abs=1e-12)
        assert cs.tie == pytest.approx(0.54, abs=1e-12)

    def test_graph_target_blocks_visual_and_fused(self):
        params = FusionParams(0.5, 1.0, -0.5)
        _, w_g, _ = params.weights()
        cs = causal_scores(0.9, 0.6, 0.3, params, beta=0.4, debias_target="graph")
        assert cs.nde == pytest.approx(w_g * 0.6, abs=1e-12)

    def test_beta_out_of_range(self):
        for beta in (-0.1, 1.2):
            with pytest.raises(ValueError):
                causal_scores(0.1, 0.2, 0.3, FusionParams.uniform(), beta=beta)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            causal_scores(0.1, 0.2, 0.3, FusionParams.uniform(), beta=0.1, debias_target="fused")

    @given(finite, finite, finite, phis, phis, phis,
           st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    @settings(max_examples=300)
    def test_identities(self, y_v, y_g, y_m, pv, pg, pm, beta):
        params = FusionParams(pv, pg, pm)
        cs = causal_scores(y_v, y_g, y_m, params, beta=beta)
        # subtraction identity, same expression tree
        assert cs.tie == cs.te - beta * cs.nde
        # closed form
        w_v, w_g, w_m = params.weights()
        closed = w_g * y_g + w_m * y_m + (1.0 - beta) * w_v * y_v
        assert cs.tie == pytest.approx(closed, abs=1e-9)

    @given(finite, finite, finite, phis, phis, phis)
    @settings(max_examples=200)
    def test_monotone_in_beta_when_visual_positive(self, y_v, y_g, y_m, pv, pg, pm):
        params = FusionParams(pv, pg, pm)
        ties = [causal_scores(y_v, y_g, y_m, params, beta=b).tie
                for b in (0.0, 0.25, 0.5, 0.75, 1.0)]
        if y_v > 0:
            assert all(a >= b - 1e-12 for a, b in zip(ties, ties[1:]))
            if y_v > 1e-9:
                assert ties[0] > ties[-1]


class TestScoreMatrix:
    def test_single_identical_pair(self):
        rng = np.random.default_rng(0)
        emb = random_embeddings(rng, 1)
        m = score_matrix(emb, emb, FusionParams.uniform(), beta=0.0)
        assert m.tie[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_beta_one_removes_visual_direct_effect(self):
        rng = np.random.default_rng(1)
        emb1 = random_embeddings(rng, 6)
        emb2 = random_embeddings(rng, 6)
        params = FusionParams(0.4, 0.1, -0.3)
        m = score_matrix(emb1, emb2, params, beta=1.0)
        _, w_g, w_m = params.weights()
        indirect = w_g * m.y_g + w_m * m.y_m
        assert np.array_equal(np.argsort(m.tie, axis=1), np.argsort(indirect, axis=1))

    def test_entrywise_identity(self):
        rng = np.random.default_rng(2)
        emb1 = random_embeddings(rng, 5)
        emb2 = random_embeddings(rng, 5)
        m = score_matrix(emb1, emb2, FusionParams(0.2, 0.5, 0.1), beta=0.3)
        assert np.max(np.abs(m.tie - (m.te - 0.3 * m.nde))) == 0.0
        for qi in range(5):
            for ci in range(5):
                cs = m.entry(qi, ci)
                assert cs.tie == pytest.approx(m.tie[qi, ci], abs=1e-12)

    def test_argmax_stable_under_row_shift(self):
        rng = np.random.default_rng(3)
        emb1 = random_embeddings(rng, 4)
        emb2 = random_embeddings(rng, 7)
        m = score_matrix(emb1, emb2, FusionParams.uniform(), beta=0.2)
        shifted = m.tie + rng.standard_normal((4, 1))  # constant per query row
        assert np.array_equal(np.argsort(-m.tie, axis=1), np.argsort(-shifted, axis=1))

    def test_empty_candidates_rejected(self):
        rng = np.random.default_rng(4)
        emb = random_embeddings(rng, 3)
        with pytest.raises(ValueError, match="empty"):
            score_matrix(emb, emb, FusionParams.uniform(), beta=0.0, candidate_ids=[])

    def test_repeat_calls_bitwise_identical(self):
        rng = np.random.default_rng(5)
        emb1 = random_embeddings(rng, 8)
        emb2 = random_embeddings(rng, 8)
        a = score_matrix(emb1, emb2, FusionParams.uniform(), beta=0.2)
        b = score_matrix(emb1, emb2, FusionParams.uniform(), beta=0.2)
        assert np.array_equal(a.tie, b.tie)
        # caller-side query partitions agree to float64 round-off
        parts = [score_matrix(emb1, emb2, FusionParams.uniform(), beta=0.2,
                              query_ids=[q]) for q in range(8)]
        stacked = np.concatenate([p.tie for p in parts], axis=0)
        assert np.allclose(a.tie, stacked, atol=1e-12, rtol=0.0)


class TestScoresTsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        emb1 = random_embeddings(rng, 3)
        emb2 = random_embeddings(rng, 4)
        m = score_matrix(emb1, emb2, FusionParams(0.1, 0.2, 0.3), beta=0.2)
        path = tmp_path / "scores.tsv"
        write_scores_tsv(path, m)
        rows = read_scores_tsv(path)
        assert len(rows.query_ids) == 12
        dense = rows.tie.reshape(3, 4)
        assert np.array_equal(dense, m.tie)
        assert np.array_equal(rows.te.reshape(3, 4), m.te)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("0\t0\t1\t1\t1\t1\t1\t1\n0\t1\toops\n")
        with pytest.raises(ValueError, match="line 2"):
            read_scores_tsv(path)
