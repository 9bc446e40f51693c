"""Interaction-log ingestion: parsing, sequence building, splitting, batching.

The raw input is delimiter-separated text with a header row. A format spec
names which columns hold the student, question, skill(s), correctness, and
temporal order. Parsed logs are normalized into a Dataset with dense ids
and persisted as a versioned JSON file so training never re-reads raw logs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, SplitError

log = logging.getLogger(__name__)

DATASET_FORMAT = "gikt-dataset"
DATASET_VERSION = 1
MIN_SEQUENCE_LENGTH = 4  # sequences must be longer than 3 interactions


@dataclass
class FormatSpec:
    """Column layout of a raw interaction log."""

    student: str
    question: str
    skill: str
    correct: str
    order: str
    delimiter: str = ","
    skill_delimiter: str = ";"
    # optional scaffolding filter: drop rows where this column != keep value
    scaffold_column: str | None = None
    scaffold_keep: str | None = None

    @classmethod
    def load(cls, path: str) -> "FormatSpec":
        values = _read_kv(path)
        required = ("student", "question", "skill", "correct", "order")
        missing = [k for k in required if k not in values]
        if missing:
            raise FormatError(f"format spec {path} is missing keys: {', '.join(missing)}")
        known = set(required) | {"delimiter", "skill_delimiter", "scaffold_column", "scaffold_keep"}
        unknown = set(values) - known
        if unknown:
            raise FormatError(f"format spec {path} has unknown keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf8") as fh:
            for key, value in vars(self).items():
                if value is not None:
                    fh.write(f"{key}={value}\n")


def _read_kv(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


@dataclass(frozen=True)
class InteractionRecord:
    student_id: int
    question_id: int
    skill_ids: frozenset[int]
    correct: int
    order_key: int


@dataclass
class ParseResult:
    records: list[InteractionRecord]
    skipped_rows: int = 0
    duplicate_rows: int = 0
    scaffold_rows: int = 0
    merged_rows: int = 0
    skipped_lines: list[tuple[int, str]] = field(default_factory=list)


def _parse_int(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        value = float(text)  # tolerate "12.0"-style ids
        if value != int(value):
            raise
        return int(value)


def parse_log(path: str, spec: FormatSpec) -> ParseResult:
    """Parse a raw log into interaction records.

    Exact duplicate rows collapse to one record. Multi-skill questions may
    arrive as delimiter-separated skill lists in one row or as repeated rows
    per skill; both merge into a single record with a skill set. Rows that
    cannot be parsed are skipped and counted.
    """
    with open(path, encoding="utf8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise FormatError(f"{path}: empty input, header row required")
        header = [h.strip() for h in header_line.rstrip("\n").split(spec.delimiter)]
        col: dict[str, int] = {}
        for name in (spec.student, spec.question, spec.skill, spec.correct, spec.order):
            if name not in header:
                raise FormatError(f"{path}: column {name!r} not found in header {header}")
            col[name] = header.index(name)
        scaffold_idx = None
        if spec.scaffold_column is not None:
            if spec.scaffold_column not in header:
                raise FormatError(f"{path}: scaffold column {spec.scaffold_column!r} not in header")
            scaffold_idx = header.index(spec.scaffold_column)

        result = ParseResult(records=[])
        merged: dict[tuple[int, int, int], dict] = {}
        seen_rows: set[tuple] = set()
        for line_no, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(spec.delimiter)
            if len(parts) != len(header):
                result.skipped_rows += 1
                result.skipped_lines.append((line_no, "column count mismatch"))
                continue
            if scaffold_idx is not None and spec.scaffold_keep is not None:
                if parts[scaffold_idx].strip() != spec.scaffold_keep:
                    result.scaffold_rows += 1
                    continue
            try:
                student = _parse_int(parts[col[spec.student]])
                question = _parse_int(parts[col[spec.question]])
                order = _parse_int(parts[col[spec.order]])
                correct_text = parts[col[spec.correct]].strip()
                skills = frozenset(
                    _parse_int(s)
                    for s in parts[col[spec.skill]].split(spec.skill_delimiter)
                    if s.strip()
                )
            except ValueError:
                result.skipped_rows += 1
                result.skipped_lines.append((line_no, "unparseable field"))
                continue
            if correct_text not in ("0", "1"):
                result.skipped_rows += 1
                result.skipped_lines.append((line_no, f"correctness {correct_text!r} not in {{0,1}}"))
                continue
            if not skills:
                result.skipped_rows += 1
                result.skipped_lines.append((line_no, "no skill tag"))
                continue
            correct = int(correct_text)

            row_key = (student, question, skills, correct, order)
            if row_key in seen_rows:
                result.duplicate_rows += 1
                continue
            seen_rows.add(row_key)

            merge_key = (student, question, order)
            entry = merged.get(merge_key)
            if entry is None:
                merged[merge_key] = {"skills": set(skills), "correct": correct}
            else:
                entry["skills"] |= skills
                result.merged_rows += 1
                if entry["correct"] != correct:
                    result.skipped_lines.append((line_no, "conflicting correctness, kept first"))

    for (student, question, order), entry in merged.items():
        result.records.append(
            InteractionRecord(student, question, frozenset(entry["skills"]), entry["correct"], order)
        )
    if result.skipped_rows:
        log.warning("%s: skipped %d unparseable rows", path, result.skipped_rows)
    return result


@dataclass
class ExerciseSequence:
    student_id: int
    steps: list[tuple[int, int]]  # (question_id, correct), time-ordered

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class Dataset:
    sequences: list[ExerciseSequence]
    question_count: int
    skill_count: int
    question_to_skills: dict[int, frozenset[int]]
    question_id_map: dict[int, int]  # original -> dense
    skill_id_map: dict[int, int]
    name: str = "dataset"

    @property
    def exercise_count(self) -> int:
        return sum(len(s) for s in self.sequences)

    def stats(self) -> dict[str, float]:
        spq = [len(v) for v in self.question_to_skills.values()]
        per_skill: dict[int, int] = {}
        for skills in self.question_to_skills.values():
            for s in skills:
                per_skill[s] = per_skill.get(s, 0) + 1
        qps = list(per_skill.values())
        return {
            "students": len(self.sequences),
            "questions": self.question_count,
            "skills": self.skill_count,
            "exercises": self.exercise_count,
            "questions_per_skill": float(np.mean(qps)) if qps else 0.0,
            "skills_per_question": float(np.mean(spq)) if spq else 0.0,
        }


def build_sequences(records: Sequence[InteractionRecord], name: str = "dataset") -> Dataset:
    """Group records per student, order them, drop short sequences, densify ids."""
    by_student: dict[int, list[tuple[int, int, InteractionRecord]]] = {}
    for pos, rec in enumerate(records):
        by_student.setdefault(rec.student_id, []).append((rec.order_key, pos, rec))

    kept: list[tuple[int, list[InteractionRecord]]] = []
    for student in sorted(by_student):
        ordered = [rec for _, _, rec in sorted(by_student[student], key=lambda t: (t[0], t[1]))]
        if len(ordered) >= MIN_SEQUENCE_LENGTH:
            kept.append((student, ordered))
    if not kept:
        log.warning("no sequences longer than %d interactions", MIN_SEQUENCE_LENGTH - 1)

    question_ids = sorted({rec.question_id for _, seq in kept for rec in seq})
    skill_ids = sorted({s for _, seq in kept for rec in seq for s in rec.skill_ids})
    qmap = {orig: dense for dense, orig in enumerate(question_ids)}
    smap = {orig: dense for dense, orig in enumerate(skill_ids)}

    question_to_skills: dict[int, set[int]] = {}
    sequences = []
    for student, ordered in kept:
        steps = []
        for rec in ordered:
            q = qmap[rec.question_id]
            steps.append((q, rec.correct))
            question_to_skills.setdefault(q, set()).update(smap[s] for s in rec.skill_ids)
        sequences.append(ExerciseSequence(student_id=student, steps=steps))

    return Dataset(
        sequences=sequences,
        question_count=len(question_ids),
        skill_count=len(skill_ids),
        question_to_skills={q: frozenset(v) for q, v in question_to_skills.items()},
        question_id_map=qmap,
        skill_id_map=smap,
        name=name,
    )


def split_train_test(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded sequence-level split; both sides share id maps and the skill map."""
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset.sequences)
    if n < 2:
        raise SplitError(f"need at least 2 sequences to split, have {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(n * ratio), 1), n - 1)
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())

    def subset(indices, suffix):
        return Dataset(
            sequences=[dataset.sequences[i] for i in indices],
            question_count=dataset.question_count,
            skill_count=dataset.skill_count,
            question_to_skills=dataset.question_to_skills,
            question_id_map=dataset.question_id_map,
            skill_id_map=dataset.skill_id_map,
            name=f"{dataset.name}-{suffix}",
        )

    return subset(train_idx, "train"), subset(test_idx, "test")


@dataclass
class Batch:
    questions: np.ndarray  # [B, T] int64, padded with 0
    answers: np.ndarray    # [B, T] int64 in {0, 1}, padded with 0
    mask: np.ndarray       # [B, T] float64, 1.0 at valid steps
    lengths: np.ndarray    # [B] int64

    @property
    def width(self) -> int:
        return int(self.questions.shape[1])


def _segments(dataset: Dataset, max_len: int) -> list[list[tuple[int, int]]]:
    """Cut sequences into consecutive segments of at most max_len steps.

    Tail segments shorter than 2 steps carry no predictable position and are
    dropped.
    """
    out = []
    for seq in dataset.sequences:
        for start in range(0, len(seq.steps), max_len):
            chunk = seq.steps[start : start + max_len]
            if len(chunk) >= 2:
                out.append(chunk)
    return out


def batch_iterator(
    dataset: Dataset,
    batch_size: int,
    max_len: int = 200,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield padded mini-batches of sequence segments."""
    if batch_size < 1:
        raise SplitError(f"batch_size must be >= 1, got {batch_size}")
    segments = _segments(dataset, max_len)
    if shuffle:
        if rng is None:
            rng = np.random.default_rng(0)
        segments = [segments[i] for i in rng.permutation(len(segments))]
    for start in range(0, len(segments), batch_size):
        group = segments[start : start + batch_size]
        width = max(len(c) for c in group)
        b = len(group)
        questions = np.zeros((b, width), dtype=np.int64)
        answers = np.zeros((b, width), dtype=np.int64)
        mask = np.zeros((b, width), dtype=np.float64)
        lengths = np.zeros(b, dtype=np.int64)
        for i, chunk in enumerate(group):
            lengths[i] = len(chunk)
            for t, (q, a) in enumerate(chunk):
                questions[i, t] = q
                answers[i, t] = a
                mask[i, t] = 1.0
        yield Batch(questions, answers, mask, lengths)


# ---------------------------------------------------------------------------
# normalized dataset file
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str) -> None:
    payload = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "name": dataset.name,
        "question_count": dataset.question_count,
        "skill_count": dataset.skill_count,
        "question_id_map": {str(k): v for k, v in dataset.question_id_map.items()},
        "skill_id_map": {str(k): v for k, v in dataset.skill_id_map.items()},
        "question_to_skills": {str(q): sorted(v) for q, v in dataset.question_to_skills.items()},
        "sequences": [
            {"student": seq.student_id, "steps": [[q, a] for q, a in seq.steps]}
            for seq in dataset.sequences
        ],
    }
    with open(path, "w", encoding="utf8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_dataset(path: str) -> Dataset:
    with open(path, encoding="utf8") as fh:
        payload = json.load(fh)
    if payload.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path} is not a {DATASET_FORMAT} file")
    if payload.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {payload.get('version')}")
    return Dataset(
        sequences=[
            ExerciseSequence(student_id=item["student"], steps=[(q, a) for q, a in item["steps"]])
            for item in payload["sequences"]
        ],
        question_count=payload["question_count"],
        skill_count=payload["skill_count"],
        question_to_skills={
            int(q): frozenset(v) for q, v in payload["question_to_skills"].items()
        },
        question_id_map={int(k): v for k, v in payload["question_id_map"].items()},
        skill_id_map={int(k): v for k, v in payload["skill_id_map"].items()},
        name=payload.get("name", "dataset"),
    )
