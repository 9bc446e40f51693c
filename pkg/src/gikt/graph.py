"""Question-skill bipartite graph and sampled graph-convolution propagation.

Questions and skills form a bipartite relation graph. Each convolution
layer replaces a node's embedding with a nonlinear transform of the mean
over itself plus a fixed-width sample of its neighbors; stacking layers
alternates hops, so after two layers a question embedding mixes in other
questions that share its skills.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, FormatError, GraphError
from .tensor import Tensor, add, embedding_lookup, matmul, mul, relu, reduce_sum, reshape, transpose


@dataclass
class RelationGraph:
    question_neighbors: list[frozenset[int]]  # index = question id -> skill ids
    skill_neighbors: list[frozenset[int]]     # index = skill id -> question ids

    @property
    def question_count(self) -> int:
        return len(self.question_neighbors)

    @property
    def skill_count(self) -> int:
        return len(self.skill_neighbors)

    def degree_stats(self) -> dict[str, float]:
        qd = [len(n) for n in self.question_neighbors]
        sd = [len(n) for n in self.skill_neighbors]
        return {
            "question_degree_mean": float(np.mean(qd)) if qd else 0.0,
            "question_degree_max": float(max(qd)) if qd else 0.0,
            "skill_degree_mean": float(np.mean(sd)) if sd else 0.0,
            "skill_degree_max": float(max(sd)) if sd else 0.0,
        }


def build_graph(dataset: Dataset) -> RelationGraph:
    """Bipartite adjacency in both directions from the dataset's skill map."""
    q_nbrs: list[set[int]] = [set() for _ in range(dataset.question_count)]
    s_nbrs: list[set[int]] = [set() for _ in range(dataset.skill_count)]
    for q in range(dataset.question_count):
        skills = dataset.question_to_skills.get(q)
        if not skills:
            raise GraphError(f"question {q} has no skill neighbors")
        for s in skills:
            q_nbrs[q].add(s)
            s_nbrs[s].add(q)
    return RelationGraph(
        question_neighbors=[frozenset(n) for n in q_nbrs],
        skill_neighbors=[frozenset(n) for n in s_nbrs],
    )


def export_edges(graph: RelationGraph, path: str) -> None:
    with open(path, "w", encoding="utf8") as fh:
        for q, skills in enumerate(graph.question_neighbors):
            for s in sorted(skills):
                fh.write(f"{q}\t{s}\n")


def import_edges(path: str) -> RelationGraph:
    pairs = []
    with open(path, encoding="utf8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                q_text, s_text = line.split("\t")
                pairs.append((int(q_text), int(s_text)))
            except ValueError:
                raise FormatError(f"{path}:{line_no}: expected 'question<TAB>skill'") from None
    if not pairs:
        raise FormatError(f"{path}: no edges")
    nq = max(q for q, _ in pairs) + 1
    ns = max(s for _, s in pairs) + 1
    q_nbrs: list[set[int]] = [set() for _ in range(nq)]
    s_nbrs: list[set[int]] = [set() for _ in range(ns)]
    for q, s in pairs:
        q_nbrs[q].add(s)
        s_nbrs[s].add(q)
    return RelationGraph([frozenset(n) for n in q_nbrs], [frozenset(n) for n in s_nbrs])


@dataclass
class NeighborTable:
    """Fixed-width sampled neighbor ids, one row per node.

    Nodes with degree >= width get a uniform sample without replacement.
    Smaller degrees keep every true neighbor once and fill the remaining
    slots by resampling with replacement, so no true neighbor is lost.
    """

    question_skills: np.ndarray  # [num_questions, n_s] int64
    skill_questions: np.ndarray  # [num_skills, n_q] int64
    seed: int | None = None


def _sample_row(neighbors: frozenset[int], width: int, rng: np.random.Generator) -> np.ndarray:
    ids = np.fromiter(sorted(neighbors), dtype=np.int64)
    if len(ids) >= width:
        return rng.choice(ids, size=width, replace=False)
    fill = rng.choice(ids, size=width - len(ids), replace=True)
    return np.concatenate([ids, fill])


def sample_neighbors(
    graph: RelationGraph, n_q: int, n_s: int, rng: np.random.Generator | int
) -> NeighborTable:
    """Fresh fixed-width neighbor tables; n_s skills per question, n_q questions per skill."""
    if n_q < 1 or n_s < 1:
        raise ConfigError(f"neighbor widths must be >= 1, got n_q={n_q}, n_s={n_s}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if seed is not None:
        rng = np.random.default_rng(seed)
    qs = np.stack([_sample_row(nbrs, n_s, rng) for nbrs in graph.question_neighbors])
    sq = np.stack([_sample_row(nbrs, n_q, rng) for nbrs in graph.skill_neighbors])
    return NeighborTable(question_skills=qs, skill_questions=sq, seed=seed)


def gcn_layer(
    self_embeddings: Tensor,
    neighbor_embeddings: Tensor,
    neighbor_table: np.ndarray,
    weight: Tensor,
    bias: Tensor,
    literal_mean: bool = False,
) -> Tensor:
    """One convolution: ReLU(W . mean(self + sampled neighbors) + b) per node.

    ``weight`` is applied on the right (x @ W); by linearity the mean can be
    taken before the transform. ``literal_mean`` divides by the neighbor
    count alone instead of neighbors plus self.
    """
    n, width = neighbor_table.shape
    if self_embeddings.shape[0] != n:
        raise GraphError(
            f"neighbor table has {n} rows but embeddings have {self_embeddings.shape[0]}"
        )
    gathered = embedding_lookup(neighbor_embeddings, neighbor_table.reshape(-1))
    summed = reduce_sum(reshape(gathered, (n, width, self_embeddings.shape[1])), axis=1)
    total = add(summed, self_embeddings)
    denom = float(width if literal_mean else width + 1)
    mean = mul(total, Tensor(1.0 / denom))
    return relu(add(matmul(mean, weight), bias))


@dataclass
class AggregatedEmbeddings:
    q_tilde: Tensor  # [num_questions, d]
    s_tilde: Tensor  # [num_skills, d]
    layers_used: int


def propagate(
    e_q: Tensor,
    e_s: Tensor,
    tables: NeighborTable | None,
    gcn_weights: list[dict[str, Tensor]],
    layers: int,
    literal_mean: bool = False,
) -> AggregatedEmbeddings:
    """Alternating-hop propagation from raw embedding tables.

    ``layers`` = 0 returns the raw tables untouched. Each layer updates
    questions from skills and skills from questions simultaneously, using
    the previous layer's values on both sides. ``gcn_weights`` holds one
    dict per layer with either a shared {"w", "b"} pair or per-type
    {"w_q", "b_q", "w_s", "b_s"} entries.
    """
    if not 0 <= layers <= 3:
        raise ConfigError(f"layers must be in 0..3, got {layers}")
    if layers == 0:
        return AggregatedEmbeddings(q_tilde=e_q, s_tilde=e_s, layers_used=0)
    if tables is None:
        raise GraphError("propagation with layers >= 1 needs sampled neighbor tables")
    if len(gcn_weights) < layers:
        raise ConfigError(f"{layers} layers requested but only {len(gcn_weights)} weight sets")
    x_q, x_s = e_q, e_s
    for l in range(layers):
        w = gcn_weights[l]
        if "w" in w:
            wq = ws = transpose(w["w"])
            bq = bs = w["b"]
        else:
            wq, bq = transpose(w["w_q"]), w["b_q"]
            ws, bs = transpose(w["w_s"]), w["b_s"]
        new_q = gcn_layer(x_q, x_s, tables.question_skills, wq, bq, literal_mean)
        new_s = gcn_layer(x_s, x_q, tables.skill_questions, ws, bs, literal_mean)
        x_q, x_s = new_q, new_s
    return AggregatedEmbeddings(q_tilde=x_q, s_tilde=x_s, layers_used=layers)
