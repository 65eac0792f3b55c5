"""Exact cosine k-NN retrieval and multi-label F1 evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericError, ShapeError

TASKS = (("S1", "S1"), ("S2", "S2"), ("S1", "S2"), ("S2", "S1"))


def task_name(task) -> str:
    return f"{task[0]}->{task[1]}"


def parse_task(name: str) -> tuple[str, str]:
    a, _, b = name.partition("->")
    if (a, b) not in TASKS:
        raise ValueError(f"unknown task {name!r}")
    return a, b


@dataclass
class EmbeddingRecord:
    image_id: str
    modality: str
    vector: np.ndarray


@dataclass
class RetrievalReport:
    task: tuple[str, str]
    k: int
    f1: float
    per_query: list[tuple[str, list[str], float]] = field(default_factory=list)


# -- embeddings file -----------------------------------------------------------


def write_embeddings(path, records: list[EmbeddingRecord]) -> None:
    """``image_id<TAB>modality<TAB>v1,...,vd`` per line."""
    lines = []
    for r in records:
        v = np.asarray(r.vector, dtype=np.float64)
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite embedding for {r.image_id}/{r.modality}")
        lines.append(f"{r.image_id}\t{r.modality}\t" + ",".join(repr(float(x)) for x in v))
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings(path) -> list[EmbeddingRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embeddings file not found: {path}")
    out, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rid, mod, vec = line.split("\t")
            v = np.array([float(x) for x in vec.split(",")])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed embedding line") from exc
        if (rid, mod) in seen:
            raise DataError(f"{path}:{lineno}: duplicate record {rid}/{mod}")
        seen.add((rid, mod))
        out.append(EmbeddingRecord(rid, mod, v))
    return out


# -- index -------------------------------------------------------------------


class EmbeddingIndex:
    """Read-only exhaustive cosine index over one modality's records."""

    def __init__(self, ids: list[str], vectors):
        vecs = np.asarray(vectors, dtype=np.float64)
        if vecs.ndim != 2 or len(ids) != len(vecs):
            raise ShapeError("ids and vectors must align")
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if (norms == 0).any():
            raise NumericError("zero-norm vector in index")
        self.ids = list(ids)
        self._ids = np.array(self.ids)
        self.unit = vecs / norms

    @classmethod
    def from_records(cls, records: list[EmbeddingRecord], modality: str) -> "EmbeddingIndex":
        rows = [r for r in records if r.modality == modality]
        return cls([r.image_id for r in rows], [r.vector for r in rows])

    def __len__(self) -> int:
        return len(self.ids)


def query_topk(index: EmbeddingIndex, q, k: int, exclude=()) -> list[str]:
    """Top-``k`` ids by descending cosine similarity; ties go to the smaller id."""
    q = np.asarray(q, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise NumericError("zero-norm query")
    exclude = set(exclude)
    keep = np.array([i not in exclude for i in index.ids], dtype=bool)
    available = int(keep.sum())
    if k > available:
        raise ConfigError(f"k={k} exceeds the {available} available candidates")
    sims = index.unit @ (q / qn)
    order = np.lexsort((index._ids, -sims))
    return [index.ids[i] for i in order if keep[i]][:k]


def f1_at_k(query_labels, retrieved_labels) -> float:
    """Mean over retrieved items of the label-set F1 against the query's labels."""
    yq = set(query_labels)
    if not yq:
        raise ValueError("query label set is empty")
    if not retrieved_labels:
        return 0.0
    scores = []
    for yr in retrieved_labels:
        yr = set(yr)
        inter = len(yq & yr)
        if not yr or inter == 0:
            scores.append(0.0)
            continue
        p, r = inter / len(yr), inter / len(yq)
        scores.append(2 * p * r / (p + r))
    return float(np.mean(scores))


def evaluate_embeddings(
    records: list[EmbeddingRecord],
    labels: dict[str, tuple[int, ...]],
    task,
    k: int = 10,
    query_ids=None,
    archive_ids=None,
) -> RetrievalReport:
    """Score one task from precomputed embeddings.

    Queries come from the task's first modality, candidates from the second.
    For uni-modal tasks the query image itself is removed from its candidates.
    """
    q_mod, a_mod = task
    by_key = {(r.image_id, r.modality): r for r in records}
    q_ids = sorted(query_ids) if query_ids is not None else sorted(r.image_id for r in records if r.modality == q_mod)
    a_ids = sorted(archive_ids) if archive_ids is not None else sorted(r.image_id for r in records if r.modality == a_mod)
    try:
        index = EmbeddingIndex(a_ids, [by_key[(i, a_mod)].vector for i in a_ids])
        queries = [by_key[(i, q_mod)].vector for i in q_ids]
    except KeyError as exc:
        raise DataError(f"missing embedding {exc.args[0]}") from exc
    uni = q_mod == a_mod
    max_k = len(index) - (1 if uni and set(q_ids) & set(a_ids) else 0)
    if k > max_k:
        raise ConfigError(f"k={k} exceeds archive size {max_k} for task {task_name(task)}")
    per_query = []
    for qid, qv in zip(q_ids, queries):
        got = query_topk(index, qv, k, exclude={qid} if uni else ())
        per_query.append((qid, got, f1_at_k(labels[qid], [labels[g] for g in got])))
    f1 = float(np.mean([s for _, _, s in per_query])) if per_query else 0.0
    return RetrievalReport(tuple(task), k, f1, per_query)


@torch.no_grad()
def embed_pairs(model, pairs, modality: str, batch_size: int = 64) -> list[EmbeddingRecord]:
    """Full-image features for one modality of a list of pairs."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        imgs = np.stack([p.img1 if modality == "S1" else p.img2 for p in chunk])
        feats = model.extract_feature(torch.as_tensor(imgs, dtype=dtype), modality)
        out += [EmbeddingRecord(p.id, modality, f.double().numpy()) for p, f in zip(chunk, feats)]
    return out


def evaluate_task(model, query_pairs, archive_pairs, task, k: int = 10) -> RetrievalReport:
    """Embed queries (first modality) and archive (second modality), then score."""
    q_mod, a_mod = task
    recs = embed_pairs(model, query_pairs, q_mod) + embed_pairs(model, archive_pairs, a_mod)
    keyed = {(r.image_id, r.modality): r for r in recs}
    labels = {p.id: p.labels for p in [*query_pairs, *archive_pairs]}
    return evaluate_embeddings(
        list(keyed.values()),
        labels,
        task,
        k,
        query_ids=[p.id for p in query_pairs],
        archive_ids=[p.id for p in archive_pairs],
    )


def random_ranking_f1(
    labels: dict[str, tuple[int, ...]],
    query_ids,
    archive_ids,
    k: int,
    seed: int = 0,
    exclude_self: bool = False,
) -> float:
    """F1@k of a seeded uniformly random ranking; the no-information baseline."""
    rng = np.random.default_rng(seed)
    archive_ids = sorted(archive_ids)
    scores = []
    for qid in sorted(query_ids):
        pool = [a for a in archive_ids if not (exclude_self and a == qid)]
        pick = rng.permutation(len(pool))[:k]
        scores.append(f1_at_k(labels[qid], [labels[pool[i]] for i in pick]))
    return float(np.mean(scores))


def format_report(reports: list[RetrievalReport], header: str = "") -> str:
    """Four task rows, then the F1 table in the uni-modal / cross-modal column layout."""
    by = {task_name(r.task): r for r in reports}
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("task\tk\tf1\tqueries")
    for r in reports:
        lines.append(f"{task_name(r.task)}\t{r.k}\t{r.f1:.6f}\t{len(r.per_query)}")
    cols = [task_name(t) for t in TASKS]
    cells = [f"{100 * by[c].f1:6.2f}" if c in by else "   n/a" for c in cols]
    lines += [
        "#",
        "# F1 (%)  | Uni-Modal CBIR    | Cross-Modal CBIR",
        "#         | " + "  ".join(f"{c:>6}" for c in cols[:2]) + "    | " + "  ".join(f"{c:>6}" for c in cols[2:]),
        "#         | " + "  ".join(cells[:2]) + "    | " + "  ".join(cells[2:]),
    ]
    return "\n".join(lines) + "\n"
