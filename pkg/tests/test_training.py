import math

import numpy as np
import pytest
import torch

from cdmea.data import SyntheticSpec, generate_synthetic_pair
from cdmea.encoders import prepare_pair
from cdmea.scoring import score_matrix
from cdmea.training import (
    DivergenceError,
    TrainConfig,
    config_hash,
    infonce_loss,
    iterative_expand_seeds,
    load_checkpoint,
    save_checkpoint,
    split_validation,
    total_loss,
    train,
    write_trace,
)


def twins(entities=60, triples=150, seed=7, **spec_overrides):
    spec = SyntheticSpec(entity_count=entities, relation_count=4, triple_count=triples,
                         rng_seed=seed, attribute_dim=24, image_dim=16, **spec_overrides)
    return generate_synthetic_pair(spec, seed_ratio=0.3)


def fast_config(**overrides):
    cfg = dict(epochs=25, batch_size=256, learning_rate=5e-3, hidden_dim=16,
               layer_count=2, visual_dim=8, iterative_every=0, rng_seed=7)
    cfg.update(overrides)
    return TrainConfig(**cfg)


class TestInfoNce:
    def test_uniform_scores_give_log_n(self):
        for n in (2, 5, 11):
            loss = infonce_loss(torch.full((n,), 0.37), 0, tau=0.5)
            assert float(loss) == pytest.approx(math.log(n), abs=1e-6)

    def test_saturated_positive_vanishes(self):
        loss = infonce_loss(torch.tensor([50.0, -50.0, -50.0]), 0, tau=1.0)
        assert 0.0 <= float(loss) < 1e-12

    def test_hand_value(self):
        loss = infonce_loss(torch.tensor([1.0, 0.0]), 0, tau=1.0)
        expected = -math.log(math.e / (math.e + 1.0))
        assert float(loss) == pytest.approx(expected, abs=1e-7)

    def test_non_negative_with_positive_in_denominator(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            row = torch.from_numpy(rng.standard_normal(6))
            assert float(infonce_loss(row, int(rng.integers(6)), tau=0.1)) >= 0.0

    def test_literal_denominator_can_go_negative(self):
        loss = infonce_loss(torch.tensor([1.0, 0.0]), 0, tau=1.0, include_positive=False)
        assert float(loss) == pytest.approx(-1.0, abs=1e-7)

    def test_argument_errors(self):
        with pytest.raises(ValueError, match="temperature"):
            infonce_loss(torch.zeros(3), 0, tau=0.0)
        with pytest.raises(ValueError, match="positive_index"):
            infonce_loss(torch.zeros(3), 5, tau=1.0)


class TestTotalLoss:
    def hand_embeddings(self):
        rng = np.random.default_rng(1)

        def unit(n, d):
            z = rng.standard_normal((n, d))
            return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))

        z1 = (unit(2, 3), unit(2, 4), unit(2, 4))
        z2 = (unit(2, 3), unit(2, 4), unit(2, 4))
        return z1, z2

    @staticmethod
    def reference_nce(matrix, tau):
        n = len(matrix)
        row = col = 0.0
        for i in range(n):
            denom = sum(math.exp(matrix[i][j] / tau) for j in range(n))
            row += -math.log(math.exp(matrix[i][i] / tau) / denom)
        for j in range(n):
            denom = sum(math.exp(matrix[i][j] / tau) for i in range(n))
            col += -math.log(math.exp(matrix[j][j] / tau) / denom)
        return 0.5 * (row / n + col / n)

    def test_matches_hand_computation(self):
        z1, z2 = self.hand_embeddings()
        cfg = TrainConfig(temperature=0.4)
        pairs = np.array([[0, 0], [1, 1]])
        weights = torch.tensor([1 / 3, 1 / 3, 1 / 3], dtype=torch.float64)
        total, terms = total_loss(z1, z2, pairs, weights, cfg)
        assert set(terms) == {"fused", "v", "g", "m"}

        expected = 0.0
        branch_mats = []
        for k in range(3):
            mat = (z1[k] @ z2[k].T).numpy(force=True)
            branch_mats.append(mat)
            expected += self.reference_nce(mat.tolist(), 0.4)
        fused = sum(m / 3.0 for m in branch_mats)
        expected += self.reference_nce(fused.tolist(), 0.4)
        assert float(total) == pytest.approx(expected, abs=1e-6)

    def test_unimodal_losses_removable(self):
        z1, z2 = self.hand_embeddings()
        cfg = TrainConfig(loss_v=False, loss_g=False, loss_m=False)
        weights = torch.tensor([1 / 3, 1 / 3, 1 / 3], dtype=torch.float64)
        _, terms = total_loss(z1, z2, np.array([[0, 0], [1, 1]]), weights, cfg)
        assert set(terms) == {"fused"}

    def test_disabled_branch_forces_loss_off(self):
        cfg = TrainConfig(use_visual=False, loss_v=True)
        assert cfg.effective_loss_toggles()["v"] is False
        cfg.validate()  # still trainable via the remaining terms

    def test_all_terms_off_rejected(self):
        cfg = TrainConfig(loss_fused=False, loss_v=False, loss_g=False, loss_m=False)
        with pytest.raises(ValueError, match="no loss terms enabled"):
            cfg.validate()
        z1, z2 = self.hand_embeddings()
        with pytest.raises(ValueError, match="no loss terms enabled"):
            total_loss(z1, z2, np.array([[0, 0], [1, 1]]),
                       torch.tensor([1 / 3, 1 / 3, 1 / 3]), cfg)

    def test_singleton_batch_rejected(self):
        z1, z2 = self.hand_embeddings()
        with pytest.raises(ValueError, match="negative"):
            total_loss(z1, z2, np.array([[0, 0]]),
                       torch.tensor([1 / 3, 1 / 3, 1 / 3]), TrainConfig())


class TestValidationSplit:
    def test_five_percent_holdout(self):
        pairs = np.stack([np.arange(40)] * 2, axis=1)
        tr, val = split_validation(pairs, 0.05, rng_seed=3)
        assert len(val) == 2 and len(tr) == 38
        merged = np.concatenate([tr, val])
        assert {tuple(p) for p in merged} == {tuple(p) for p in pairs}

    def test_degenerate_set_validates_on_train(self):
        pairs = np.array([[0, 0], [1, 1], [2, 2]])
        tr, val = split_validation(pairs, 0.05, rng_seed=3)
        assert np.array_equal(tr, pairs) and np.array_equal(val, pairs)


class TestPseudoLabeling:
    def test_identity_scores_add_all(self):
        original = np.array([[0, 0]])
        got = iterative_expand_seeds(original, np.eye(3), [1, 2, 3], [1, 2, 3])
        assert {tuple(p) for p in got} == {(0, 0), (1, 1), (2, 2), (3, 3)}

    def test_empty_pool_unchanged(self):
        original = np.array([[0, 0], [1, 1]])
        got = iterative_expand_seeds(original, np.zeros((0, 0)), [], [])
        assert np.array_equal(got, original)

    def test_matches_brute_force_double_argmax(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal((8, 8))
        left = np.arange(2, 10)
        right = np.arange(12, 20)
        got = iterative_expand_seeds(np.zeros((0, 2), dtype=np.int64), scores, left, right)

        expected = set()
        for i in range(8):
            j = max(range(8), key=lambda c: scores[i, c])
            back = max(range(8), key=lambda r: scores[r, j])
            if back == i:
                expected.add((left[i], right[j]))
        assert {tuple(p) for p in got} == expected
        assert len(expected) > 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            iterative_expand_seeds(np.zeros((0, 2)), np.zeros((2, 2)), [1], [2, 3])


class TestTrain:
    def test_twins_converge(self):
        kg1, kg2, seeds = twins()
        result = train(kg1, kg2, seeds, fast_config())
        assert result.trace[-1].val_h1 >= 0.9
        # brute-force nearest neighbor on the graph branch separates the twins
        gt1, gt2 = prepare_pair(kg1, kg2)
        emb1 = result.model.modality_embeddings(gt1)
        emb2 = result.model.modality_embeddings(gt2)
        sims = emb1.z_g @ emb2.z_g.T
        val = result.val_pairs
        assert (sims[val[:, 0]].argmax(axis=1) == val[:, 1]).mean() >= 0.9

    def test_deterministic_trace(self):
        kg1, kg2, seeds = twins()
        cfg = fast_config(epochs=6)
        a = train(kg1, kg2, seeds, cfg)
        b = train(kg1, kg2, seeds, cfg)
        assert [(r.loss, r.val_h1) for r in a.trace] == [(r.loss, r.val_h1) for r in b.trace]

    def test_relation_rows_stay_unit(self):
        kg1, kg2, seeds = twins()
        result = train(kg1, kg2, seeds, fast_config(epochs=5))
        for enc in (result.model.graph_encoder, result.model.fused_encoder):
            norms = torch.linalg.vector_norm(enc.relation_embeddings, dim=1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_seed_monotonicity_under_pseudo_labeling(self):
        kg1, kg2, seeds = twins()
        cfg = fast_config(epochs=8, iterative_every=3)
        result = train(kg1, kg2, seeds, cfg)
        train_used, _ = split_validation(seeds.train_pairs, cfg.validation_fraction,
                                         cfg.rng_seed)
        final = {tuple(p) for p in result.final_train_pairs}
        assert {tuple(p) for p in train_used} <= final
        assert len(final) > len(train_used)  # twins are easy; pseudo pairs appear

    def test_loss_positive_throughout(self):
        kg1, kg2, seeds = twins()
        result = train(kg1, kg2, seeds, fast_config(epochs=5))
        assert all(r.loss >= 0.0 for r in result.trace)

    def test_literal_denominator_variant_runs(self):
        kg1, kg2, seeds = twins()
        result = train(kg1, kg2, seeds,
                       fast_config(epochs=3, exclude_positive_denominator=True))
        assert len(result.trace) == 3

    def test_divergence_reported_with_term(self):
        kg1, kg2, seeds = twins()
        kg1.image_features = kg1.image_features.copy()
        kg1.image_features[0, 0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(kg1, kg2, seeds, fast_config(epochs=2))

    def test_too_few_seeds_rejected(self):
        kg1, kg2, seeds = twins()
        seeds.train_pairs = seeds.train_pairs[:1]
        with pytest.raises(ValueError, match="train seed"):
            train(kg1, kg2, seeds, fast_config())

    def test_trace_file_format(self, tmp_path):
        kg1, kg2, seeds = twins()
        result = train(kg1, kg2, seeds, fast_config(epochs=3))
        path = tmp_path / "trace.tsv"
        write_trace(path, result.trace)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        epoch, loss, val_h1 = lines[0].split("\t")
        assert epoch == "0"
        assert float(loss) == pytest.approx(result.trace[0].loss)
        assert float(val_h1) == pytest.approx(result.trace[0].val_h1)


class TestCheckpoint:
    def evaluate_tie(self, model, kg1, kg2, seeds):
        gt1, gt2 = prepare_pair(kg1, kg2)
        emb1 = model.modality_embeddings(gt1)
        emb2 = model.modality_embeddings(gt2)
        return score_matrix(emb1, emb2, model.fusion_params(), beta=0.2,
                            query_ids=seeds.test_pairs[:, 0],
                            candidate_ids=seeds.test_pairs[:, 1]).tie

    def test_save_load_reproduces_scores(self, tmp_path):
        kg1, kg2, seeds = twins()
        cfg = fast_config(epochs=4)
        result = train(kg1, kg2, seeds, cfg)
        before = self.evaluate_tie(result.model, kg1, kg2, seeds)

        path = tmp_path / "model.npz"
        opt = torch.optim.AdamW(result.model.parameters(), lr=cfg.learning_rate)
        save_checkpoint(path, result.model, opt, epoch=4, config=cfg)
        model, _, epoch, config = load_checkpoint(path)
        assert epoch == 4
        assert config == cfg
        after = self.evaluate_tie(model, kg1, kg2, seeds)
        assert np.max(np.abs(before - after)) < 1e-6

    def test_hash_mismatch_refused(self, tmp_path):
        kg1, kg2, seeds = twins()
        cfg = fast_config(epochs=2)
        result = train(kg1, kg2, seeds, cfg)
        path = tmp_path / "model.npz"
        save_checkpoint(path, result.model, None, epoch=2, config=cfg)

        import json

        with np.load(path, allow_pickle=False) as payload:
            arrays = {k: payload[k] for k in payload.files}
        meta = json.loads(str(arrays["meta"]))
        meta["config"]["epochs"] = 999  # tamper without refreshing the hash
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        np.savez(path, **arrays)

        with pytest.raises(ValueError, match="hash mismatch"):
            load_checkpoint(path)
        model, _, _, _ = load_checkpoint(path, verify_hash=False)
        assert model is not None

    def test_config_hash_stable(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert config_hash(TrainConfig()) != config_hash(TrainConfig(epochs=3))
