"""Tests for the model: encoding, LSTM, recap, interaction, and full forward."""

import numpy as np
import pytest

from gikt.config import TrainConfig
from gikt.data import Dataset, ExerciseSequence
from gikt.errors import CheckpointError, ContractError
from gikt.graph import build_graph, sample_neighbors
from gikt.model import (
    GiktParams,
    encode_exercise,
    forward_batch,
    forward_sequence,
    interaction_predict,
    load_checkpoint,
    lstm_step,
    recap_hard,
    recap_soft,
    save_checkpoint,
    similarity_matrix,
)
from gikt.tensor import Tape, Tensor, reduce_sum

from helpers import check_gradients

D = 6


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        embed_dim=D,
        lstm_sizes=(8, D),
        gcn_layers=1,
        n_q=2,
        n_s=2,
        recap_mode="hard_exercise",
        recap_k=3,
        skills_in_interaction=2,
        keep_prob=1.0,
        batch_size=4,
        epochs=2,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


def tiny_dataset(n_questions=5, n_skills=3) -> Dataset:
    q2s = {q: frozenset({q % n_skills}) for q in range(n_questions)}
    q2s[0] = frozenset({0, 1})  # one multi-skill question
    return Dataset(
        sequences=[ExerciseSequence(0, [(q % n_questions, q % 2) for q in range(6)])],
        question_count=n_questions,
        skill_count=n_skills,
        question_to_skills=q2s,
        question_id_map={q: q for q in range(n_questions)},
        skill_id_map={s: s for s in range(n_skills)},
    )


def make_params(cfg=None, seed=0, n_questions=5, n_skills=3):
    cfg = cfg or tiny_config()
    return GiktParams(n_questions, n_skills, cfg, np.random.default_rng(seed))


class TestEncode:
    def test_zero_weights_zero_bias(self):
        params = make_params()
        params.w1.data[:] = 0.0
        params.b1.data[:] = 0.0
        e = encode_exercise(Tensor(np.ones((1, D))), 1, params)
        np.testing.assert_array_equal(e.data, np.zeros((1, D)))

    def test_relu_clips_negative_bias(self):
        params = make_params()
        params.w1.data[:] = 0.0
        params.b1.data[:] = [1.0, -1.0, 2.0, -2.0, 0.5, -0.5]
        e = encode_exercise(Tensor(np.zeros((1, D))), 0, params)
        np.testing.assert_array_equal(e.data, [[1.0, 0.0, 2.0, 0.0, 0.5, 0.0]])

    def test_answer_changes_encoding(self):
        params = make_params(seed=3)
        q_row = Tensor(np.random.default_rng(1).normal(size=(1, D)))
        e0 = encode_exercise(q_row, 0, params)
        e1 = encode_exercise(q_row, 1, params)
        assert np.abs(e0.data - e1.data).max() > 1e-6

    def test_bad_answer_rejected(self):
        with pytest.raises(ContractError):
            encode_exercise(Tensor(np.zeros((1, D))), 2, make_params())


def zeroed_gates(layer):
    for name in ("w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c"):
        getattr(layer, name).data[:] = 0.0


class TestLstm:
    def test_zero_params_zero_cell(self):
        params = make_params()
        zeroed_gates(params.lstm1)
        h, c = lstm_step(Tensor(np.ones((1, D))), Tensor(np.zeros((1, 8))),
                         Tensor(np.zeros((1, 8))), params.lstm1)
        np.testing.assert_array_equal(c.data, np.zeros((1, 8)))
        np.testing.assert_array_equal(h.data, np.zeros((1, 8)))

    def test_zero_params_nonzero_cell(self):
        params = make_params()
        zeroed_gates(params.lstm1)
        v = np.linspace(-1.0, 1.0, 8).reshape(1, 8)
        h, c = lstm_step(Tensor(np.ones((1, D))), Tensor(np.zeros((1, 8))),
                         Tensor(v), params.lstm1)
        np.testing.assert_allclose(c.data, 0.5 * v, atol=1e-15)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * v), atol=1e-15)

    def test_three_steps_match_naive_oracle(self):
        params = make_params(seed=9)
        layer = params.lstm1
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(3, 1, D))

        def sig(z):
            return 1.0 / (1.0 + np.exp(-z))

        h = np.zeros((1, 8))
        c = np.zeros((1, 8))
        ht = Tensor(h.copy())
        ct = Tensor(c.copy())
        for step in range(3):
            x = xs[step]
            gate_in = np.concatenate([x, h, c], axis=1)
            i = sig(gate_in @ layer.w_i.data.T + layer.b_i.data)
            f = sig(gate_in @ layer.w_f.data.T + layer.b_f.data)
            o = sig(gate_in @ layer.w_o.data.T + layer.b_o.data)
            cand = np.tanh(np.concatenate([x, h], axis=1) @ layer.w_c.data.T + layer.b_c.data)
            c = f * c + i * cand
            h = o * np.tanh(c)
            ht, ct = lstm_step(Tensor(x), ht, ct, layer)
            np.testing.assert_allclose(ct.data, c, atol=1e-12)
            np.testing.assert_allclose(ht.data, h, atol=1e-12)

    def test_gradcheck(self):
        params = make_params(seed=10)
        layer = params.lstm1
        x = Tensor(np.random.default_rng(5).normal(size=(2, D)), requires_grad=True)
        tensors = [x, layer.w_i, layer.w_f, layer.w_o, layer.w_c,
                   layer.b_i, layer.b_f, layer.b_o, layer.b_c]

        def forward():
            h, c = lstm_step(x, Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))), layer)
            h2, _ = lstm_step(x, h, c, layer)
            return reduce_sum(h2)

        check_gradients(forward, tensors)


class TestRecapHard:
    def test_exact_skill_set_match(self):
        s1, s12, s2 = frozenset({1}), frozenset({1, 2}), frozenset({2})
        sel = recap_hard([s1, s12, s2], s12, k=5)
        assert sel.indices == [1]

    def test_unseen_target_empty(self):
        sel = recap_hard([frozenset({1}), frozenset({2})], frozenset({3}), k=5)
        assert sel.indices == []

    def test_recency_cap(self):
        skills = [frozenset({1})] * 7
        sel = recap_hard(skills, frozenset({1}), k=5)
        assert sel.indices == [2, 3, 4, 5, 6]

    def test_k_zero_empty(self):
        assert recap_hard([frozenset({1})], frozenset({1}), k=0).indices == []

    def test_subset_is_not_a_match(self):
        sel = recap_hard([frozenset({1})], frozenset({1, 2}), k=5)
        assert sel.indices == []


class TestRecapSoft:
    def test_identical_vector_always_selected(self):
        x = np.random.default_rng(0).normal(size=4)
        sims = similarity_matrix(np.stack([x, -x, x]))
        sel = recap_soft(sims[:2, 2], k=1, v=1.0 - 1e-9)
        assert sel.indices == [0]

    def test_degenerate_bounds_select_everything(self):
        scores = np.array([-0.9, 0.1, 0.4])
        assert recap_soft(scores, k=3, v=-1.0).indices == [0, 1, 2]

    def test_rank_and_bound(self):
        sel = recap_soft(np.array([0.9, 0.2, 0.8]), k=2, v=0.5)
        assert sel.indices == [0, 2]

    def test_matches_sort_and_filter_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            scores = np.round(rng.uniform(-1, 1, size=n), 1)  # rounding forces ties
            for k in range(0, n + 2):
                v = float(rng.uniform(-1, 1))
                got = recap_soft(scores, k, v).indices
                order = sorted(range(n), key=lambda i: (-scores[i], -i))
                want = sorted(i for i in order[:k] if scores[i] >= v)
                assert got == want

    def test_zero_norm_rows_score_zero(self):
        sims = similarity_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert sims[0, 1] == 0.0


class TestInteraction:
    def test_single_orthogonal_pair(self):
        params = make_params()
        h = Tensor(np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]))
        q = Tensor(np.array([[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]]))
        p, alpha = interaction_predict(h, None, q, None, params)
        np.testing.assert_allclose(alpha.data, [1.0], atol=1e-15)
        assert p.item() == pytest.approx(0.5, abs=1e-12)

    def test_zero_attention_is_uniform_mean(self):
        params = make_params(seed=2)
        params.attn_w.data[:] = 0.0
        params.attn_b.data = np.asarray(0.0)
        rng = np.random.default_rng(7)
        h = Tensor(rng.normal(size=(1, D)))
        recap = Tensor(rng.normal(size=(2, D)))
        q = Tensor(rng.normal(size=(1, D)))
        skills = Tensor(rng.normal(size=(2, D)))
        p, alpha = interaction_predict(h, recap, q, skills, params)
        np.testing.assert_allclose(alpha.data, np.full(9, 1.0 / 9.0), atol=1e-15)
        left = np.vstack([h.data, recap.data])
        right = np.vstack([q.data, skills.data])
        scores = 1.0 / (1.0 + np.exp(-(left @ right.T)))
        assert p.item() == pytest.approx(scores.mean(), abs=1e-12)

    def test_two_by_two_hand_computed(self):
        params = make_params()
        params.attn_w.data[:] = np.concatenate([np.full(D, 0.3), np.full(D, -0.2)])
        params.attn_b.data = np.asarray(0.1)
        h = Tensor(np.full((1, D), 0.5))
        recap = Tensor(np.full((1, D), -0.25))
        q = Tensor(np.full((1, D), 1.0))
        skills = Tensor(np.full((1, D), 0.75))
        p, alpha = interaction_predict(h, recap, q, skills, params)

        left = np.vstack([h.data, recap.data])
        right = np.vstack([q.data, skills.data])
        logits = np.array(
            [[0.3 * left[i].sum() - 0.2 * right[j].sum() + 0.1 for j in range(2)] for i in range(2)]
        ).reshape(-1)
        expect_alpha = np.exp(logits - logits.max())
        expect_alpha /= expect_alpha.sum()
        scores = (1.0 / (1.0 + np.exp(-(left @ right.T)))).reshape(-1)
        np.testing.assert_allclose(alpha.data, expect_alpha, atol=1e-12)
        assert p.item() == pytest.approx(float(expect_alpha @ scores), abs=1e-12)

    def test_uniform_flag_ignores_pair_order(self):
        params = make_params(seed=4)
        rng = np.random.default_rng(8)
        h = Tensor(rng.normal(size=(1, D)))
        recap = rng.normal(size=(3, D))
        q = Tensor(rng.normal(size=(1, D)))
        p1, _ = interaction_predict(h, Tensor(recap), q, None, params, uniform=True)
        p2, _ = interaction_predict(h, Tensor(recap[::-1].copy()), q, None, params, uniform=True)
        assert p1.item() == pytest.approx(p2.item(), abs=1e-15)

    def test_probability_and_alpha_invariants(self):
        params = make_params(seed=5)
        rng = np.random.default_rng(9)
        for _ in range(500):
            n_recap = int(rng.integers(0, 4))
            n_skills = int(rng.integers(0, 4))
            h = Tensor(rng.normal(scale=3.0, size=(1, D)))
            recap = Tensor(rng.normal(scale=3.0, size=(n_recap, D))) if n_recap else None
            q = Tensor(rng.normal(scale=3.0, size=(1, D)))
            skills = Tensor(rng.normal(scale=3.0, size=(n_skills, D))) if n_skills else None
            p, alpha = interaction_predict(h, recap, q, skills, params,
                                           uniform=bool(rng.integers(0, 2)))
            assert 0.0 < p.item() < 1.0
            assert abs(alpha.data.sum() - 1.0) <= 1e-12


def forward_on(dataset, cfg, seed=0, training=False, rngs_seed=100):
    params = make_params(cfg, seed=seed,
                         n_questions=dataset.question_count, n_skills=dataset.skill_count)
    graph = build_graph(dataset)
    tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(rngs_seed))
    steps = dataset.sequences[0].steps
    questions = np.array([[q for q, _ in steps]])
    answers = np.array([[a for _, a in steps]])
    lengths = np.array([len(steps)])
    return params, graph, tables, forward_batch(
        params, questions, answers, lengths, graph,
        training=training,
        tables=tables,
        dropout_rng=np.random.default_rng(rngs_seed + 1),
        sample_rng=np.random.default_rng(rngs_seed + 2),
    )


class TestForward:
    @pytest.mark.parametrize("mode", ["hard_exercise", "soft_exercise", "hard_state", "soft_state"])
    def test_all_recap_modes_produce_probabilities(self, mode):
        ds = tiny_dataset()
        cfg = tiny_config(recap_mode=mode, gcn_layers=2)
        _, _, _, result = forward_on(ds, cfg)
        assert result.predictions.size == len(ds.sequences[0].steps) - 1
        assert np.all(result.predictions.data > 0.0)
        assert np.all(result.predictions.data < 1.0)

    def test_short_sequence_rejected(self):
        ds = tiny_dataset()
        params = make_params(tiny_config(), n_questions=5, n_skills=3)
        with pytest.raises(ContractError):
            forward_sequence([(0, 1)], params, build_graph(ds))

    def test_causality_prefix_invariance(self):
        # full-degree sampling removes stochastic draws, so a prefix forward
        # must reproduce the prefix of the full forward exactly
        ds = tiny_dataset()
        cfg = tiny_config(n_q=8, n_s=8, skills_in_interaction=3, recap_mode="soft_state")
        params = make_params(cfg, seed=11, n_questions=5, n_skills=3)
        graph = build_graph(ds)
        tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(0))
        steps = ds.sequences[0].steps
        full = forward_sequence(steps, params, graph, tables=tables)
        prefix = forward_sequence(steps[:4], params, graph, tables=tables)
        np.testing.assert_allclose(prefix, full[:3], atol=1e-12)

    def test_batched_equals_single_sequences(self):
        ds = tiny_dataset()
        cfg = tiny_config(recap_mode="soft_state", n_q=8, n_s=8, skills_in_interaction=3)
        params = make_params(cfg, seed=12, n_questions=5, n_skills=3)
        graph = build_graph(ds)
        tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(1))
        seq_a = [(0, 1), (1, 0), (2, 1), (3, 0), (4, 1)]
        seq_b = [(2, 0), (0, 1), (1, 1)]
        width = 5
        questions = np.zeros((2, width), dtype=np.int64)
        answers = np.zeros((2, width), dtype=np.int64)
        lengths = np.array([5, 3])
        for row, seq in enumerate((seq_a, seq_b)):
            for t, (q, a) in enumerate(seq):
                questions[row, t] = q
                answers[row, t] = a
        batched = forward_batch(params, questions, answers, lengths, build_graph(ds),
                                training=False, tables=tables)
        single_a = forward_sequence(seq_a, params, graph, tables=tables)
        single_b = forward_sequence(seq_b, params, graph, tables=tables)
        merged = np.concatenate([single_a, single_b])
        np.testing.assert_allclose(batched.predictions.data, merged, atol=1e-10)

    def test_rhs_config_gives_single_pair(self):
        ds = tiny_dataset()
        cfg = tiny_config(recap_k=0, skills_in_interaction=0, gcn_layers=0)
        _, _, _, result = forward_batch_alpha_probe(ds, cfg)
        assert result  # every prediction came from exactly one (state, question) pair

    def test_full_model_gradcheck(self):
        ds = tiny_dataset()
        cfg = tiny_config(gcn_layers=1, recap_mode="hard_exercise")
        params = make_params(cfg, seed=13, n_questions=5, n_skills=3)
        graph = build_graph(ds)
        tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(2))
        steps = ds.sequences[0].steps[:4]
        questions = np.array([[q for q, _ in steps]])
        answers = np.array([[a for _, a in steps]])
        lengths = np.array([len(steps)])

        def forward():
            result = forward_batch(params, questions, answers, lengths, graph,
                                   training=False, tables=tables)
            return reduce_sum(result.predictions)

        check_gradients(forward, [t for _, t in params.trainable()])


def forward_batch_alpha_probe(dataset, cfg):
    """Check that the stripped-down config scores exactly one pair per step."""
    from gikt.model import _pair_attention  # the shared scoring core
    from gikt.tensor import slice_axis

    params = make_params(cfg, n_questions=dataset.question_count, n_skills=dataset.skill_count)
    d = cfg.embed_dim
    rng = np.random.default_rng(3)
    probes = []
    for _ in range(5):
        left = Tensor(rng.normal(size=(1, d)))
        right = Tensor(rng.normal(size=(1, d)))
        p, alpha = _pair_attention(
            left, right,
            slice_axis(params.attn_w, 0, 0, d),
            slice_axis(params.attn_w, 0, d, 2 * d),
            params.attn_b,
        )
        probes.append(alpha.size == 1 and 0.0 < p.item() < 1.0)
    return None, None, None, all(probes)


class TestCheckpoint:
    def test_round_trip_bit_identical_predictions(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_config(recap_mode="soft_state", gcn_layers=2)
        params = make_params(cfg, seed=14, n_questions=5, n_skills=3)
        graph = build_graph(ds)
        tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(5))
        steps = ds.sequences[0].steps
        before = forward_sequence(steps, params, graph, tables=tables)

        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        after = forward_sequence(steps, loaded, graph, tables=tables)
        np.testing.assert_array_equal(before, after)

    def test_save_is_deterministic(self, tmp_path):
        params = make_params(tiny_config(), seed=15)
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, params)
        save_checkpoint(b, params)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_shape_mismatch_fails_loudly(self, tmp_path):
        params = make_params(tiny_config(), seed=16)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params)
        blob = open(path, "rb").read()
        tampered = blob.replace(b'"name":"encode.bias","shape":[6]',
                                b'"name":"encode.bias","shape":[7]')
        assert tampered != blob
        bad = str(tmp_path / "bad.ckpt")
        open(bad, "wb").write(tampered)
        with pytest.raises(CheckpointError, match="encode.bias"):
            load_checkpoint(bad)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


class TestParams:
    def test_every_tensor_registered_once(self):
        params = make_params(tiny_config(gcn_layers=3))
        names = [n for n, _ in params.named_tensors()]
        assert len(names) == len(set(names))

    def test_skill_table_excluded_when_unused(self):
        params = make_params(tiny_config(gcn_layers=0, skills_in_interaction=0))
        trainable = {n for n, _ in params.trainable()}
        assert "embed.skill" not in trainable
        params2 = make_params(tiny_config(gcn_layers=0, skills_in_interaction=2))
        assert "embed.skill" in {n for n, _ in params2.trainable()}

    def test_answer_table_has_two_rows(self):
        assert make_params().e_a.shape[0] == 2
