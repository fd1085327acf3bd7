"""Retrieval evaluation: exact nearest neighbor, Recall@N, the step-by-task
recall matrix, the forgetting score, and fused old+new retrieval.

Retrieval is brute force (desk-scale databases make exactness cheap) with
distance ties broken by lowest sample_id so every result is reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .encoder import encode
from .errors import ConfigurationError, UsageError

RESULTS_FILE = "results.json"
RECALL_CSV = "recall_matrix.csv"


@dataclass
class RetrievalIndex:
    """Embedded database plus everything needed to embed queries the same way."""

    embeddings: np.ndarray  # (M, D) or (M, 2D) when fused
    poses: np.ndarray  # (M, 2)
    sample_ids: np.ndarray  # (M,)
    snapshots: tuple  # the 1 or 2 snapshots that produced the embeddings
    fused: bool

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.embeddings) == 0:
            raise UsageError("index needs a non-empty 2-D embedding matrix")
        if not np.all(np.isfinite(self.embeddings)):
            raise UsageError("index embeddings must be finite")


@dataclass
class RetrievalResult:
    sample_ids: np.ndarray
    distances: np.ndarray
    truncated: bool  # k exceeded the database size; full ranking returned


@dataclass
class RecallOutcome:
    percent: float
    evaluated: int
    excluded: int  # queries with no true positive anywhere in the database


@dataclass
class ForgettingReport:
    score: float
    per_task_drops: list


def _embed(snapshots, samples, fused: bool) -> np.ndarray:
    scans = np.stack([s.scan.points for s in samples])
    parts = [
        encode(s.params, scans, normalize=s.normalize, producer="old").vectors
        for s in snapshots
    ]
    return np.concatenate(parts, axis=1) if fused else parts[0]


def build_index(snapshots, database_samples: list, fusion: bool) -> RetrievalIndex:
    """Embed a database with one snapshot, or two concatenated when fused."""
    snaps = tuple(snapshots) if isinstance(snapshots, (list, tuple)) else (snapshots,)
    if fusion and len(snaps) != 2:
        raise UsageError(f"fusion needs exactly two snapshots, got {len(snaps)}")
    if not fusion and len(snaps) != 1:
        raise UsageError(f"single-model index needs one snapshot, got {len(snaps)}")
    if not database_samples:
        raise UsageError("database is empty")
    emb = _embed(snaps, database_samples, fusion)
    return RetrievalIndex(
        embeddings=emb,
        poses=np.stack([s.pose for s in database_samples]),
        sample_ids=np.array([s.sample_id for s in database_samples]),
        snapshots=snaps,
        fused=fusion,
    )


def _rank_row(distances: np.ndarray, sample_ids: np.ndarray) -> np.ndarray:
    # lexsort: primary key distance, secondary lowest sample_id on exact ties
    return np.lexsort((sample_ids, distances))


def retrieve(index: RetrievalIndex, query_sample, k: int) -> RetrievalResult:
    """Top-k database entries nearest to one query scan, exact search."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    q = _embed(index.snapshots, [query_sample], index.fused)
    d = cdist(q, index.embeddings)[0]
    order = _rank_row(d, index.sample_ids)
    truncated = k > len(order)
    take = order[: min(k, len(order))]
    return RetrievalResult(
        sample_ids=index.sample_ids[take], distances=d[take], truncated=truncated
    )


def _recall_from_embeddings(
    db_emb, db_poses, db_ids, q_emb, q_poses, pos_test: float, n: int
) -> RecallOutcome:
    dists = cdist(q_emb, db_emb)
    is_pos = cdist(q_poses, db_poses) < pos_test
    hits = 0
    evaluated = 0
    excluded = 0
    top = min(n, db_emb.shape[0])
    for i in range(len(q_emb)):
        if not is_pos[i].any():
            excluded += 1
            continue
        evaluated += 1
        order = _rank_row(dists[i], db_ids)[:top]
        if is_pos[i, order].any():
            hits += 1
    if evaluated == 0:
        raise UsageError("every query lacked a true positive in the database")
    return RecallOutcome(
        percent=100.0 * hits / evaluated, evaluated=evaluated, excluded=excluded
    )


def recall_at_n(index: RetrievalIndex, queries: list, pos_test: float, n: int) -> RecallOutcome:
    """Percent of queries whose top-n contains a sample within pos_test meters.

    Queries with no true positive anywhere in the database are excluded from
    the denominator and reported in ``excluded``.
    """
    if not queries:
        raise UsageError("empty query split")
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    q_emb = _embed(index.snapshots, queries, index.fused)
    q_poses = np.stack([s.pose for s in queries])
    return _recall_from_embeddings(
        index.embeddings, index.poses, index.sample_ids, q_emb, q_poses, pos_test, n
    )


def forgetting_score(recall_matrix: np.ndarray, mode: str = "printed") -> ForgettingReport:
    """Mean drop from each earlier task's best recall to its final recall.

    ``printed`` takes the best over steps 0..t (zero-shot rows included);
    ``from_t`` restricts to steps t..T-2, the conventional reading.
    """
    r = np.asarray(recall_matrix, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise UsageError(f"recall matrix must be square, got {r.shape}")
    t_total = r.shape[0]
    if t_total < 2:
        raise UsageError("forgetting needs at least 2 tasks")
    if mode not in ("printed", "from_t"):
        raise ConfigurationError(f"forgetting_max must be printed|from_t, got {mode!r}")
    drops = []
    for t in range(t_total - 1):
        if mode == "printed":
            best = r[: t + 1, t].max()
        else:
            best = r[t : t_total - 1, t].max()
        drops.append(float(best - r[t_total - 1, t]))
    return ForgettingReport(score=float(np.mean(drops)), per_task_drops=drops)


# ---------------------------------------------------------------------------
# Whole-protocol evaluation


@dataclass
class ProtocolEvaluation:
    recall_matrix: np.ndarray  # (T, T), rows = training steps, cols = tasks
    mean_recall_at_1: float
    forgetting: ForgettingReport | None  # None when T < 2
    cells: list  # per (step, task) dicts with counts
    fused: bool


def evaluate_protocol(run, fusion: bool, forgetting_max: str = "printed") -> ProtocolEvaluation:
    """Fill R[l][t] for every training step l and task t, zero-shot included.

    With fusion on, row 0 uses snapshot 0 alone and row l >= 1 concatenates
    the step l-1 and step l embeddings.
    """
    t_total = len(run.snapshots)
    if t_total == 0:
        raise UsageError("protocol run has no snapshots")
    for i in range(t_total):
        if i >= len(run.db_splits) or not run.db_splits[i]:
            raise ConfigurationError(f"missing database split for domain {run.domain_names[i]}")
        if i >= len(run.query_splits) or not run.query_splits[i]:
            raise ConfigurationError(f"missing query split for domain {run.domain_names[i]}")

    # Encode every corpus once per snapshot; fused rows concatenate from cache.
    emb = {}
    for l, snap in enumerate(run.snapshots):
        for t in range(t_total):
            emb[(l, t, "db")] = _embed((snap,), run.db_splits[t], fused=False)
            emb[(l, t, "q")] = _embed((snap,), run.query_splits[t], fused=False)
    db_poses = [np.stack([s.pose for s in split]) for split in run.db_splits]
    db_ids = [np.array([s.sample_id for s in split]) for split in run.db_splits]
    q_poses = [np.stack([s.pose for s in split]) for split in run.query_splits]

    r = np.zeros((t_total, t_total))
    cells = []
    for l in range(t_total):
        rows = (l,) if not fusion or l == 0 else (l - 1, l)
        for t in range(t_total):
            db_e = np.concatenate([emb[(i, t, "db")] for i in rows], axis=1)
            q_e = np.concatenate([emb[(i, t, "q")] for i in rows], axis=1)
            outcome = _recall_from_embeddings(
                db_e, db_poses[t], db_ids[t], q_e, q_poses[t], run.policy.pos_test, 1
            )
            r[l, t] = outcome.percent
            cells.append(
                {
                    "step": l,
                    "task": t,
                    "recall_at_1": outcome.percent,
                    "evaluated": outcome.evaluated,
                    "excluded": outcome.excluded,
                    "embedding_dim": int(db_e.shape[1]),
                }
            )
    report = forgetting_score(r, mode=forgetting_max) if t_total >= 2 else None
    return ProtocolEvaluation(
        recall_matrix=r,
        mean_recall_at_1=float(r[t_total - 1].mean()),
        forgetting=report,
        cells=cells,
        fused=fusion,
    )


# ---------------------------------------------------------------------------
# Result serialization (canonical: byte-identical for identical runs)


def _mode_dict(ev: ProtocolEvaluation) -> dict:
    return {
        "recall_matrix": [[float(v) for v in row] for row in ev.recall_matrix],
        "mean_recall_at_1": ev.mean_recall_at_1,
        "forgetting": ev.forgetting.score if ev.forgetting else None,
        "per_task_drops": ev.forgetting.per_task_drops if ev.forgetting else None,
    }


def results_dict(
    headline: ProtocolEvaluation,
    single: ProtocolEvaluation,
    fused: ProtocolEvaluation | None,
    seed: int,
    config_digest: str,
    notes: str = "",
) -> dict:
    d = _mode_dict(headline)
    return {
        "recall_matrix": d["recall_matrix"],
        "mean_recall_at_1": d["mean_recall_at_1"],
        "forgetting": d["forgetting"],
        "per_step_details": {
            "seed": seed,
            "config_digest": config_digest,
            "headline_mode": "fused" if headline.fused else "single",
            "single": _mode_dict(single),
            "fused": _mode_dict(fused) if fused is not None else None,
            "cells": headline.cells,
            "notes": notes,
        },
    }


def dump_results(d: dict) -> str:
    """Canonical JSON: sorted keys, no timestamps, newline-terminated."""
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def write_recall_csv(recall_matrix: np.ndarray, task_names, path) -> None:
    """Rows = training steps, columns = tasks."""
    r = np.asarray(recall_matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step"] + list(task_names))
        for l in range(r.shape[0]):
            writer.writerow([l] + [repr(float(v)) for v in r[l]])
