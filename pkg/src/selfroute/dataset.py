"""Difficulty estimation, level bucketing, and gradient-dataset assembly.

A query's difficulty is one minus the general backend's empirical accuracy
over k independent full-length attempts.  Difficulties bucket into five
levels; a "gradient" dataset samples a per-level quota, stratified across
source datasets, so the mix spans easy to unsolvable.  Solvability labels
for router training come from exactly one full-length canonical attempt,
not from the k estimation trials.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import Backend
from .core import (
    CapabilityEmbedding,
    Label,
    Query,
    RunSeed,
    derive_rng,
    derive_seed,
    grade,
)
from .errors import DatasetConstructionError, DomainError, MissingGoldError, TransportError
from .preinference import PreinferenceConfig, collect_embedding

__all__ = [
    "LEVEL_BOUNDARIES",
    "DifficultyRecord",
    "GradientDataset",
    "LabeledExample",
    "assign_level",
    "estimate_accuracy",
    "build_gradient",
    "label_solvable",
    "collect_labeled_examples",
    "write_difficulty_records",
    "read_difficulty_records",
    "write_labeled_examples",
    "read_labeled_examples",
    "embeddings_path",
]

logger = logging.getLogger(__name__)

# Upper bounds (exclusive) of levels 1..4; level 5 runs to 1.0 inclusive.
# Chosen so the published per-level mean difficulties (0.06, 0.20, 0.40,
# 0.58, 0.90 for the 7B profile) land centrally in their buckets.
LEVEL_BOUNDARIES = (0.125, 0.30, 0.50, 0.70)


def assign_level(difficulty: float) -> int:
    """Bucket a difficulty score into level 1..5 (half-open boundaries)."""
    if not math.isfinite(difficulty) or not 0.0 <= difficulty <= 1.0:
        raise DomainError(f"difficulty must be in [0,1], got {difficulty!r}")
    for level, bound in enumerate(LEVEL_BOUNDARIES, start=1):
        if difficulty < bound:
            return level
    return 5


@dataclass(frozen=True)
class DifficultyRecord:
    """Estimated difficulty of one query under one model.

    Unusable records (backend kept failing) keep the attempt counts but
    carry no accuracy/difficulty/level — they are excluded from gradient
    assembly rather than treated as difficulty 1.0.
    """

    query_id: str
    model_name: str
    trials: int
    correct: int
    accuracy: float | None
    difficulty: float | None
    level: int | None
    source: str = ""
    usable: bool = True

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise DomainError("trials must be >= 1")
        if not 0 <= self.correct <= self.trials:
            raise DomainError("correct must be in [0, trials]")
        if self.usable:
            if self.accuracy is None or self.difficulty is None or self.level is None:
                raise DomainError("usable record must carry accuracy/difficulty/level")
            if self.accuracy != self.correct / self.trials:
                raise DomainError("accuracy must equal correct/trials")
            if self.difficulty != 1.0 - self.accuracy:
                raise DomainError("difficulty must equal 1 - accuracy")
            if self.level != assign_level(self.difficulty):
                raise DomainError("level inconsistent with difficulty")


@dataclass(frozen=True)
class LabeledExample:
    """(capability embedding, solvability label) pair for router training."""

    query_id: str
    embedding: CapabilityEmbedding
    label: Label

    def __post_init__(self) -> None:
        if self.embedding.query_id != self.query_id:
            raise DomainError(
                f"embedding belongs to {self.embedding.query_id!r}, not {self.query_id!r}"
            )


def estimate_accuracy(
    query: Query, backend: Backend, k: int, seed: RunSeed
) -> DifficultyRecord:
    """Run k full short-CoT attempts and score difficulty = 1 - accuracy.

    Trial streams are keyed by (query id, trial index), so estimates are
    replayable and independent of evaluation order or concurrency.
    A backend that keeps failing yields an unusable record instead of a
    fake difficulty.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    if query.gold_answer is None:
        raise MissingGoldError(f"query {query.id} has no gold answer")
    correct = 0
    done = 0
    try:
        for trial in range(k):
            result = backend.generate(
                query.text,
                backend.spec.default_max_tokens,
                seed=derive_seed(seed, "difficulty", query.id, trial),
            )
            correct += int(grade(result.text, query.gold_answer))
            done += 1
    except TransportError as exc:
        logger.warning("difficulty estimate for %s aborted: %s", query.id, exc)
        return DifficultyRecord(
            query_id=query.id,
            model_name=backend.spec.name,
            trials=k,
            correct=correct,
            accuracy=None,
            difficulty=None,
            level=None,
            source=query.source,
            usable=False,
        )
    accuracy = correct / k
    difficulty = 1.0 - accuracy
    return DifficultyRecord(
        query_id=query.id,
        model_name=backend.spec.name,
        trials=k,
        correct=correct,
        accuracy=accuracy,
        difficulty=difficulty,
        level=assign_level(difficulty),
        source=query.source,
    )


@dataclass(frozen=True)
class GradientDataset:
    """Difficulty-stratified sample: up to ``quota_per_level`` records per level."""

    levels: dict[int, tuple[DifficultyRecord, ...]]
    quota_per_level: int

    def __post_init__(self) -> None:
        if set(self.levels) != {1, 2, 3, 4, 5}:
            raise DomainError("gradient dataset must carry levels 1..5")
        seen: set[str] = set()
        for level, records in self.levels.items():
            if not records:
                raise DatasetConstructionError(f"level {level} is empty")
            if len(records) > self.quota_per_level:
                raise DomainError(f"level {level} exceeds quota")
            for record in records:
                if record.level != level:
                    raise DomainError(f"record {record.query_id} filed under wrong level")
                if record.query_id in seen:
                    raise DatasetConstructionError(f"duplicate query id {record.query_id}")
                seen.add(record.query_id)

    def counts(self) -> dict[int, int]:
        return {level: len(records) for level, records in sorted(self.levels.items())}

    def all_records(self) -> list[DifficultyRecord]:
        return [record for level in sorted(self.levels) for record in self.levels[level]]

    def mean_difficulty(self, level: int) -> float:
        records = self.levels[level]
        return float(sum(r.difficulty for r in records) / len(records))


def build_gradient(
    records: list[DifficultyRecord], quota_per_level: int, seed: RunSeed
) -> GradientDataset:
    """Sample up to the quota per level, round-robin across source tags.

    Within each source, candidates are sorted by query id and then
    shuffled with a seeded stream keyed by (level, source); sources are
    visited in sorted order.  The result therefore does not depend on the
    input ordering, only on the seed and the candidate set.
    """
    if quota_per_level < 1:
        raise DomainError("quota_per_level must be >= 1")
    usable = [r for r in records if r.usable]
    ids = [r.query_id for r in usable]
    if len(ids) != len(set(ids)):
        raise DatasetConstructionError("duplicate query ids among candidates")

    by_level: dict[int, list[DifficultyRecord]] = {lvl: [] for lvl in (1, 2, 3, 4, 5)}
    for record in usable:
        by_level[record.level].append(record)

    selected: dict[int, tuple[DifficultyRecord, ...]] = {}
    for level in (1, 2, 3, 4, 5):
        candidates = by_level[level]
        if not candidates:
            raise DatasetConstructionError(f"no candidates for level {level}")
        by_source: dict[str, list[DifficultyRecord]] = {}
        for record in candidates:
            by_source.setdefault(record.source, []).append(record)
        queues = []
        for source in sorted(by_source):
            pool = sorted(by_source[source], key=lambda r: r.query_id)
            rng = derive_rng(seed, "gradient", level, source)
            rng.shuffle(pool)  # type: ignore[arg-type]
            queues.append(deque(pool))
        picks: list[DifficultyRecord] = []
        while len(picks) < quota_per_level and any(queues):
            for queue in queues:
                if queue and len(picks) < quota_per_level:
                    picks.append(queue.popleft())
        if len(picks) < quota_per_level:
            logger.warning(
                "level %d short of quota: %d of %d", level, len(picks), quota_per_level
            )
        selected[level] = tuple(picks)
    return GradientDataset(levels=selected, quota_per_level=quota_per_level)


def label_solvable(query: Query, backend: Backend, seed: RunSeed | None = None) -> Label:
    """Grade one full-length solution attempt by the general backend.

    The default ``seed=None`` asks the backend for its canonical (greedy)
    attempt, which is what the routing label means; an explicit seed is
    forwarded for backends that sample.
    """
    if query.gold_answer is None:
        raise MissingGoldError(f"query {query.id} has no gold answer")
    result = backend.generate(query.text, backend.spec.default_max_tokens, seed=seed)
    return grade(result.text, query.gold_answer)


def collect_labeled_examples(
    queries: list[Query],
    backend: Backend,
    config: PreinferenceConfig,
    seed: RunSeed | None = None,
) -> list[LabeledExample]:
    """Probe and label each query against the same general backend."""
    examples = []
    for query in queries:
        embedding = collect_embedding(query, backend, config, seed=seed)
        label = label_solvable(query, backend)
        examples.append(LabeledExample(query_id=query.id, embedding=embedding, label=label))
    return examples


# --------------------------------------------------------------------------
# Files: JSON-lines records, sibling binary embeddings
# --------------------------------------------------------------------------


def write_difficulty_records(
    path: str | Path, rows: list[tuple[Query, DifficultyRecord]]
) -> None:
    """One JSON object per line, carrying the query alongside its record."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for query, record in rows:
            fh.write(
                json.dumps(
                    {
                        "query_id": query.id,
                        "text": query.text,
                        "source": query.source,
                        "gold_answer": query.gold_answer,
                        "model_name": record.model_name,
                        "trials": record.trials,
                        "correct": record.correct,
                        "accuracy": record.accuracy,
                        "difficulty": record.difficulty,
                        "level": record.level,
                        "usable": record.usable,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def read_difficulty_records(path: str | Path) -> list[tuple[Query, DifficultyRecord]]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            query = Query(
                id=obj["query_id"],
                text=obj["text"],
                source=obj.get("source", ""),
                gold_answer=obj.get("gold_answer"),
            )
            record = DifficultyRecord(
                query_id=obj["query_id"],
                model_name=obj["model_name"],
                trials=obj["trials"],
                correct=obj["correct"],
                accuracy=obj["accuracy"],
                difficulty=obj["difficulty"],
                level=obj["level"],
                source=obj.get("source", ""),
                usable=obj.get("usable", True),
            )
            rows.append((query, record))
    return rows


def embeddings_path(jsonl_path: str | Path) -> Path:
    """Sibling binary file holding the embeddings for a labeled-example file."""
    return Path(jsonl_path).with_suffix(".bin")


def write_labeled_examples(jsonl_path: str | Path, examples: list[LabeledExample]) -> None:
    """Write labels as JSONL and embeddings as a sibling f32 binary.

    The binary starts with one JSON header line {count, layers, dim,
    layer_indices} followed by little-endian float32 data in the same row
    order as the JSONL.
    """
    if not examples:
        raise DatasetConstructionError("refusing to write an empty example file")
    shapes = {(e.embedding.num_layers, e.embedding.dim) for e in examples}
    indices = {e.embedding.layer_indices for e in examples}
    if len(shapes) != 1 or len(indices) != 1:
        raise DatasetConstructionError("examples carry inconsistent embedding shapes")
    (num_layers, dim) = next(iter(shapes))

    jsonl_path = Path(jsonl_path)
    with jsonl_path.open("w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(
                json.dumps(
                    {
                        "query_id": example.query_id,
                        "label": int(example.label),
                        "probe_tokens": example.embedding.probe_tokens,
                        "probe_text": example.embedding.probe_text,
                        "from_prompt_only": example.embedding.from_prompt_only,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")

    header = json.dumps(
        {
            "count": len(examples),
            "layers": num_layers,
            "dim": dim,
            "layer_indices": list(next(iter(indices))),
        },
        sort_keys=True,
    )
    block = np.stack(
        [np.stack([np.asarray(v, dtype="<f4") for v in e.embedding.layers]) for e in examples]
    )
    with embeddings_path(jsonl_path).open("wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        fh.write(block.astype("<f4").tobytes(order="C"))


def read_labeled_examples(jsonl_path: str | Path) -> list[LabeledExample]:
    jsonl_path = Path(jsonl_path)
    rows = []
    with jsonl_path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))

    with embeddings_path(jsonl_path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = fh.read()
    count, num_layers, dim = header["count"], header["layers"], header["dim"]
    layer_indices = tuple(header.get("layer_indices", range(1, num_layers + 1)))
    if count != len(rows):
        raise DatasetConstructionError(
            f"embedding file holds {count} rows, JSONL holds {len(rows)}"
        )
    expected = count * num_layers * dim * 4
    if len(data) != expected:
        raise DatasetConstructionError(
            f"embedding payload is {len(data)} bytes, expected {expected}"
        )
    block = np.frombuffer(data, dtype="<f4").reshape(count, num_layers, dim)

    examples = []
    for i, row in enumerate(rows):
        embedding = CapabilityEmbedding(
            layers=tuple(np.array(block[i, j]) for j in range(num_layers)),
            probe_text=row.get("probe_text", ""),
            probe_tokens=row["probe_tokens"],
            query_id=row["query_id"],
            layer_indices=layer_indices,
            from_prompt_only=row.get("from_prompt_only", False),
        )
        examples.append(
            LabeledExample(
                query_id=row["query_id"],
                embedding=embedding,
                label=Label(row["label"]),
            )
        )
    return examples
