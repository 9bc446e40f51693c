"""The GIKT forward pass and its trainable parameters.

Per timestep the model (1) encodes the (question, answer) pair into an
exercise vector, (2) evolves student state through a two-layer LSTM whose
gates see the previous cell state, (3) recaps relevant history for the
target question by hard skill-set matching or soft top-k similarity, and
(4) scores every pair between {current state, recap entries} and {target
question, its sampled skills} with an attention-weighted sum of sigmoid
inner products, giving the correctness probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .errors import CheckpointError, ContractError
from .graph import AggregatedEmbeddings, NeighborTable, RelationGraph, propagate, sample_neighbors
from .tensor import (
    Tape,
    Tensor,
    add,
    clip,
    concat,
    dropout,
    embedding_lookup,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    tanh,
    transpose,
)

# keep probabilities bounded away from {0, 1} so the log loss stays finite
# even when a sigmoid saturates in float64
PROB_FLOOR = 1e-12


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class LstmGates:
    """One LSTM layer: gate weights [hidden, x+h+c], candidate weights [hidden, x+h]."""

    def __init__(self, rng: np.random.Generator, x_dim: int, hidden: int):
        gate_in = x_dim + 2 * hidden
        cand_in = x_dim + hidden
        self.w_i = Tensor(_glorot(rng, hidden, gate_in, (hidden, gate_in)), requires_grad=True)
        self.w_f = Tensor(_glorot(rng, hidden, gate_in, (hidden, gate_in)), requires_grad=True)
        self.w_o = Tensor(_glorot(rng, hidden, gate_in, (hidden, gate_in)), requires_grad=True)
        self.w_c = Tensor(_glorot(rng, hidden, cand_in, (hidden, cand_in)), requires_grad=True)
        self.b_i = Tensor(np.zeros(hidden), requires_grad=True)
        self.b_f = Tensor(np.zeros(hidden), requires_grad=True)
        self.b_o = Tensor(np.zeros(hidden), requires_grad=True)
        self.b_c = Tensor(np.zeros(hidden), requires_grad=True)

    def named(self, prefix: str):
        for gate in ("i", "f", "o", "c"):
            yield f"{prefix}.w_{gate}", getattr(self, f"w_{gate}")
            yield f"{prefix}.b_{gate}", getattr(self, f"b_{gate}")


class GiktParams:
    """Every trainable tensor of the model, created from a config and a seed."""

    def __init__(self, question_count: int, skill_count: int, config: TrainConfig,
                 rng: np.random.Generator):
        d = config.embed_dim
        h1, h2 = config.lstm_sizes
        self.question_count = question_count
        self.skill_count = skill_count
        self.config = config

        self.e_q = Tensor(rng.uniform(-0.05, 0.05, (question_count, d)), requires_grad=True)
        self.e_s = Tensor(rng.uniform(-0.05, 0.05, (skill_count, d)), requires_grad=True)
        self.e_a = Tensor(rng.uniform(-0.05, 0.05, (2, d)), requires_grad=True)

        self.gcn: list[dict[str, Tensor]] = []
        for _ in range(config.gcn_layers):
            if config.per_type_weights:
                layer = {
                    "w_q": Tensor(_glorot(rng, d, d, (d, d)), requires_grad=True),
                    "b_q": Tensor(np.zeros(d), requires_grad=True),
                    "w_s": Tensor(_glorot(rng, d, d, (d, d)), requires_grad=True),
                    "b_s": Tensor(np.zeros(d), requires_grad=True),
                }
            else:
                layer = {
                    "w": Tensor(_glorot(rng, d, d, (d, d)), requires_grad=True),
                    "b": Tensor(np.zeros(d), requires_grad=True),
                }
            self.gcn.append(layer)

        self.w1 = Tensor(_glorot(rng, d, 2 * d, (d, 2 * d)), requires_grad=True)
        self.b1 = Tensor(np.zeros(d), requires_grad=True)

        self.lstm1 = LstmGates(rng, d, h1)
        self.lstm2 = LstmGates(rng, h1, h2)

        self.attn_w = Tensor(_glorot(rng, 1, 2 * d, (2 * d,)), requires_grad=True)
        self.attn_b = Tensor(0.0, requires_grad=True)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [
            ("embed.question", self.e_q),
            ("embed.skill", self.e_s),
            ("embed.answer", self.e_a),
            ("encode.weight", self.w1),
            ("encode.bias", self.b1),
        ]
        for l, layer in enumerate(self.gcn):
            for key in sorted(layer):
                out.append((f"gcn.{l}.{key}", layer[key]))
        out.extend(self.lstm1.named("lstm.0"))
        out.extend(self.lstm2.named("lstm.1"))
        out.append(("attn.weight", self.attn_w))
        out.append(("attn.bias", self.attn_b))
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        """Tensors with a gradient path under this config, each exactly once."""
        cfg = self.config
        skill_table_used = cfg.gcn_layers > 0 or cfg.skills_in_interaction > 0
        return [
            (name, t)
            for name, t in self.named_tensors()
            if name != "embed.skill" or skill_table_used
        ]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GIKT-CKPT-1\n"


def save_checkpoint(path: str, params: GiktParams) -> None:
    named = params.named_tensors()
    header = {
        "version": 1,
        "question_count": params.question_count,
        "skill_count": params.skill_count,
        "config": params.config.to_dict(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf8"))
        fh.write(b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> GiktParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
        config = TrainConfig.from_dict(header["config"])
        params = GiktParams(
            header["question_count"], header["skill_count"], config,
            np.random.default_rng(0),
        )
        by_name = dict(params.named_tensors())
        if set(by_name) != {t["name"] for t in header["tensors"]}:
            raise CheckpointError(f"{path}: tensor names do not match this config")
        for entry in header["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            target = by_name[name]
            if target.shape != shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {shape}, expected {target.shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * 8)
            if len(blob) != count * 8:
                raise CheckpointError(f"{path}: truncated data for tensor {name}")
            target.data = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return params


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------


def encode_exercise(q_tilde_t: Tensor, answer: int, params: GiktParams) -> Tensor:
    """e = ReLU(W . [question vector, answer vector] + b) for a single step."""
    if answer not in (0, 1):
        raise ContractError(f"answer must be 0 or 1, got {answer}")
    a_row = embedding_lookup(params.e_a, [answer])
    q_row = q_tilde_t if q_tilde_t.ndim == 2 else reshape(q_tilde_t, (1, q_tilde_t.size))
    joined = concat([q_row, a_row], axis=1)
    return relu(add(matmul(joined, transpose(params.w1)), params.b1))


def _prep_gates(layer: LstmGates) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    mats = {g: transpose(getattr(layer, f"w_{g}")) for g in ("i", "f", "o", "c")}
    biases = {g: getattr(layer, f"b_{g}") for g in ("i", "f", "o", "c")}
    return mats, biases


def _lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
               mats: dict[str, Tensor], biases: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    # input, forget, and output gates see the previous cell state; the
    # candidate sees only the input and previous hidden state
    gate_in = concat([x, h_prev, c_prev], axis=1)
    i = sigmoid(add(matmul(gate_in, mats["i"]), biases["i"]))
    f = sigmoid(add(matmul(gate_in, mats["f"]), biases["f"]))
    o = sigmoid(add(matmul(gate_in, mats["o"]), biases["o"]))
    cand = tanh(add(matmul(concat([x, h_prev], axis=1), mats["c"]), biases["c"]))
    c = add(mul(f, c_prev), mul(i, cand))
    h = mul(o, tanh(c))
    return h, c


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              layer: LstmGates) -> tuple[Tensor, Tensor]:
    """One recurrence step for a batch of row vectors."""
    mats, biases = _prep_gates(layer)
    return _lstm_step(x, h_prev, c_prev, mats, biases)


# ---------------------------------------------------------------------------
# recap
# ---------------------------------------------------------------------------


@dataclass
class RecapSelection:
    mode: str
    indices: list[int]            # selected history timesteps, ascending
    scores: np.ndarray | None     # per-history similarity (soft modes only)


def recap_hard(history_skills: Sequence[frozenset[int]],
               target_skills: frozenset[int], k: int) -> RecapSelection:
    """History steps whose question has exactly the target's skill set.

    More than k matches keep the k most recent. Empty selections are valid.
    """
    matches = [i for i, skills in enumerate(history_skills) if skills == target_skills]
    selected = matches[-k:] if k > 0 else []
    return RecapSelection(mode="hard", indices=selected, scores=None)


def recap_soft(scores: np.ndarray, k: int, v: float) -> RecapSelection:
    """Top-k history steps by similarity score, filtered at the lower bound v.

    Ties in score prefer the more recent step.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k > 0:
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], -i))
        selected = sorted(i for i in order[:k] if scores[i] >= v)
    else:
        selected = []
    return RecapSelection(mode="soft", indices=selected, scores=scores)


def similarity_matrix(vectors: np.ndarray, kind: str = "cosine") -> np.ndarray:
    """Pairwise scores between rows; zero-norm rows score 0 under cosine."""
    if kind == "cosine":
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        unit = np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)
        return unit @ unit.T
    if kind == "dot":
        return vectors @ vectors.T
    raise ContractError(f"unknown similarity kind {kind!r}")


# ---------------------------------------------------------------------------
# interaction
# ---------------------------------------------------------------------------


def _pair_attention(left: Tensor, right: Tensor, w_left: Tensor, w_right: Tensor,
                    bias: Tensor, uniform: bool = False) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of sigmoid inner products over all row pairs."""
    n_left, n_right = left.shape[0], right.shape[0]
    pair_scores = reshape(sigmoid(matmul(left, transpose(right))), (n_left * n_right,))
    if uniform:
        alpha = Tensor(np.full(n_left * n_right, 1.0 / (n_left * n_right)))
        p = reduce_mean(pair_scores)
    else:
        left_part = reshape(matmul(left, w_left), (n_left, 1))
        right_part = reshape(matmul(right, w_right), (1, n_right))
        logits = reshape(add(add(left_part, right_part), bias), (n_left * n_right,))
        alpha = softmax(logits)
        p = reduce_sum(mul(alpha, pair_scores))
    return clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR), alpha


def interaction_predict(h_t: Tensor, recap_rows: Tensor | None, q_tilde_t: Tensor,
                        skill_rows: Tensor | None, params: GiktParams,
                        uniform: bool = False) -> tuple[Tensor, Tensor]:
    """Probability of a correct answer from state/history x question/skills.

    ``h_t`` and ``q_tilde_t`` are [1, d] rows and always present; recap and
    skill rows are optional [k, d] matrices.
    """
    d = params.config.embed_dim
    left = h_t if recap_rows is None else concat([h_t, recap_rows], axis=0)
    right = q_tilde_t if skill_rows is None else concat([q_tilde_t, skill_rows], axis=0)
    w_left = slice_axis(params.attn_w, 0, 0, d)
    w_right = slice_axis(params.attn_w, 0, d, 2 * d)
    return _pair_attention(left, right, w_left, w_right, params.attn_b, uniform=uniform)


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    predictions: Tensor            # [n] probabilities, scan order (sequence, then time)
    labels: np.ndarray             # [n] true answers
    positions: list[tuple[int, int]]  # (row in batch, timestep)
    aggregated: AggregatedEmbeddings


def _sample_interaction_skills(neighbors: frozenset[int], count: int,
                               rng: np.random.Generator | None) -> list[int]:
    if count <= 0:
        return []
    ordered = sorted(neighbors)
    if len(ordered) <= count:
        return ordered
    if rng is None:
        raise ContractError("skill sampling needs a generator when degree exceeds the budget")
    picked = rng.choice(len(ordered), size=count, replace=False)
    return [ordered[i] for i in sorted(picked)]


def forward_batch(
    params: GiktParams,
    questions: np.ndarray,
    answers: np.ndarray,
    lengths: np.ndarray,
    graph: RelationGraph,
    *,
    training: bool,
    tables: NeighborTable | None = None,
    dropout_rng: np.random.Generator | None = None,
    sample_rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Run the model over a padded batch and emit predictions for every
    step that has at least one history step.

    ``tables`` must be provided when the config uses graph layers; they are
    sampled once per batch by the caller so train and inference control the
    sampling policy.
    """
    cfg = params.config
    b_size, width = questions.shape
    d = cfg.embed_dim
    keep = cfg.keep_prob

    agg = propagate(params.e_q, params.e_s, tables, params.gcn, cfg.gcn_layers,
                    literal_mean=cfg.eq1_literal)
    q_tilde, s_tilde = agg.q_tilde, agg.s_tilde

    # encode every (question, answer) position at once
    flat_q = questions.reshape(-1)
    flat_a = answers.reshape(-1)
    q_rows = embedding_lookup(q_tilde, flat_q)
    a_rows = embedding_lookup(params.e_a, flat_a)
    enc_in = concat([q_rows, a_rows], axis=1)
    e_all = relu(add(matmul(enc_in, transpose(params.w1)), params.b1))
    e_all = dropout(e_all, keep, training, dropout_rng)

    # evolve student state; padded steps carry states forward unchanged
    h1_size, h2_size = cfg.lstm_sizes
    mats1, biases1 = _prep_gates(params.lstm1)
    mats2, biases2 = _prep_gates(params.lstm2)
    h1 = Tensor(np.zeros((b_size, h1_size)))
    c1 = Tensor(np.zeros((b_size, h1_size)))
    h2 = Tensor(np.zeros((b_size, h2_size)))
    c2 = Tensor(np.zeros((b_size, h2_size)))
    step_mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)

    def blend(new: Tensor, prev: Tensor, col: np.ndarray) -> Tensor:
        keep_new = Tensor(col[:, None])
        keep_old = Tensor(1.0 - col[:, None])
        return add(mul(keep_new, new), mul(keep_old, prev))

    h2_steps: list[Tensor] = []
    row_base = np.arange(b_size) * width
    for t in range(width):
        e_t = embedding_lookup(e_all, row_base + t)
        new_h1, new_c1 = _lstm_step(e_t, h1, c1, mats1, biases1)
        col = step_mask[:, t]
        partial = col.min() < 1.0
        if partial:
            new_h1, new_c1 = blend(new_h1, h1, col), blend(new_c1, c1, col)
        h1, c1 = new_h1, new_c1
        layer2_in = dropout(h1, keep, training, dropout_rng)
        new_h2, new_c2 = _lstm_step(layer2_in, h2, c2, mats2, biases2)
        if partial:
            new_h2, new_c2 = blend(new_h2, h2, col), blend(new_c2, c2, col)
        h2, c2 = new_h2, new_c2
        h2_steps.append(h2)
    states = concat(h2_steps, axis=0)  # row t*b_size + b
    states = dropout(states, keep, training, dropout_rng)

    # per-history similarity scores for soft recap
    soft = cfg.recap_mode.startswith("soft") and cfg.recap_k > 0
    if soft:
        source = params.e_q.data if cfg.recap_on_raw_embeddings else q_tilde.data
        sims = [similarity_matrix(source[questions[b]], cfg.recap_score) for b in range(b_size)]
    use_states = cfg.recap_mode.endswith("state")

    w_left = slice_axis(params.attn_w, 0, 0, d)
    w_right = slice_axis(params.attn_w, 0, d, 2 * d)

    preds: list[Tensor] = []
    labels: list[int] = []
    positions: list[tuple[int, int]] = []
    skill_sets = graph.question_neighbors
    for b in range(b_size):
        seq_q = questions[b]
        history_skills = [skill_sets[q] for q in seq_q]
        for t in range(1, int(lengths[b])):
            target_q = int(seq_q[t])
            if cfg.recap_k > 0:
                if soft:
                    selection = recap_soft(sims[b][:t, t], cfg.recap_k, cfg.recap_v)
                else:
                    selection = recap_hard(history_skills[:t], skill_sets[target_q], cfg.recap_k)
                chosen = selection.indices
            else:
                chosen = []

            if use_states:
                left_ids = [(t - 1) * b_size + b] + [i * b_size + b for i in chosen]
                left = embedding_lookup(states, left_ids)
            else:
                left = embedding_lookup(states, [(t - 1) * b_size + b])
                if chosen:
                    exercise_rows = embedding_lookup(e_all, [b * width + i for i in chosen])
                    left = concat([left, exercise_rows], axis=0)

            skill_ids = _sample_interaction_skills(
                skill_sets[target_q], cfg.skills_in_interaction, sample_rng
            )
            right = embedding_lookup(q_tilde, [target_q])
            if skill_ids:
                right = concat([right, embedding_lookup(s_tilde, skill_ids)], axis=0)

            p, _ = _pair_attention(left, right, w_left, w_right, params.attn_b,
                                   uniform=cfg.uniform_attention)
            preds.append(reshape(p, (1,)))
            labels.append(int(answers[b, t]))
            positions.append((b, t))

    predictions = concat(preds) if preds else Tensor(np.zeros(0))
    return ForwardResult(
        predictions=predictions,
        labels=np.asarray(labels, dtype=np.float64),
        positions=positions,
        aggregated=agg,
    )


def forward_sequence(
    steps: Sequence[tuple[int, int]],
    params: GiktParams,
    graph: RelationGraph,
    *,
    tables: NeighborTable | None = None,
    sample_seed: int = 0,
) -> np.ndarray:
    """Evaluation-mode predictions p_2..p_T for one sequence."""
    if len(steps) < 2:
        raise ContractError(f"need at least 2 steps to predict, got {len(steps)}")
    cfg = params.config
    if tables is None and cfg.gcn_layers > 0:
        tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, np.random.default_rng(sample_seed))
    questions = np.array([[q for q, _ in steps]], dtype=np.int64)
    answers = np.array([[a for _, a in steps]], dtype=np.int64)
    lengths = np.array([len(steps)], dtype=np.int64)
    result = forward_batch(
        params, questions, answers, lengths, graph,
        training=False, tables=tables,
        sample_rng=np.random.default_rng(sample_seed + 1),
    )
    return result.predictions.data.copy()
