"""Boundary evaluation: relative-distance matching, F1 per threshold, annotator handling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 11))
CONSISTENCY_THRESHOLD = 0.05


def parse_thresholds(spec: str) -> tuple[float, ...]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into thresholds."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ValueError(f"threshold step must be positive, got {step}")
        n = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(n))
    return tuple(float(x) for x in spec.split(",") if x.strip())


def rel_dis(detected: float, truth: float, duration: float) -> float:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    return abs(detected - truth) / duration


def _adjacency(dets, truths, duration, threshold):
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    d = np.asarray(dets, dtype=np.float64)[:, None]
    t = np.asarray(truths, dtype=np.float64)[None, :]
    return np.abs(d - t) / duration <= threshold


def match_boundaries(detections: Sequence[float], truths: Sequence[float],
                     duration: float, threshold: float, greedy: bool = False) -> int:
    """Size of a maximum one-to-one matching between detections and truths.

    An edge joins a detection and a truth whenever their relative distance is
    within ``threshold``. ``greedy=True`` instead pairs each detection (in
    order) with its nearest unmatched feasible truth, which is what some other
    evaluation scripts do; it can undercount.
    """
    if len(detections) == 0 or len(truths) == 0:
        return 0
    adj = _adjacency(detections, truths, duration, threshold)
    if greedy:
        return _greedy_match(detections, truths, adj)
    n_truth = adj.shape[1]
    owner = [-1] * n_truth
    neighbours = [np.flatnonzero(row).tolist() for row in adj]

    def augment(i, seen):
        for j in neighbours[i]:
            if seen[j]:
                continue
            seen[j] = True
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    count = 0
    for i in range(adj.shape[0]):
        if neighbours[i] and augment(i, [False] * n_truth):
            count += 1
    return count


def _greedy_match(detections, truths, adj):
    used = np.zeros(adj.shape[1], dtype=bool)
    t = np.asarray(truths, dtype=np.float64)
    count = 0
    for i, d in enumerate(detections):
        cand = np.flatnonzero(adj[i] & ~used)
        if cand.size:
            j = cand[np.argmin(np.abs(t[cand] - d))]
            used[j] = True
            count += 1
    return count


def prf(matches: int, n_det: int, n_truth: int) -> tuple[float, float, float]:
    precision = matches / n_det if n_det else 0.0
    recall = matches / n_truth if n_truth else 0.0
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom > 0 else 0.0
    return precision, recall, f1


def f1_at(detections, truths, duration, threshold, greedy=False):
    """Return ``(precision, recall, f1)``; empty sides score 0 by convention."""
    m = match_boundaries(detections, truths, duration, threshold, greedy=greedy)
    return prf(m, len(detections), len(truths))


@dataclass
class VideoEval:
    video_id: str
    # per threshold: (selected annotator, matches, n_det, n_truth, p, r, f1)
    rows: dict[float, tuple[int, int, int, int, float, float, float]]


def evaluate_multi_annotator(detections, annotation_set, thresholds=DEFAULT_THRESHOLDS,
                             greedy=False) -> VideoEval:
    """Score detections against every annotator and keep the best F1 per threshold.

    Ties between annotators go to the lowest index.
    """
    if not annotation_set.annotators:
        raise ValueError(f"{annotation_set.video_id}: no annotators")
    rows = {}
    for thr in thresholds:
        best = None
        for k, truths in enumerate(annotation_set.annotators):
            m = match_boundaries(detections, truths, annotation_set.duration, thr, greedy=greedy)
            p, r, f = prf(m, len(detections), len(truths))
            if best is None or f > best[6]:
                best = (k, m, len(detections), len(truths), p, r, f)
        rows[thr] = best
    return VideoEval(annotation_set.video_id, rows)


def select_consistent_annotation(annotation_set, threshold=CONSISTENCY_THRESHOLD) -> int:
    """Index of the annotator whose boundaries agree best with the others.

    Agreement is the mean F1 of an annotator's boundaries scored against each
    other annotator as ground truth.
    """
    annotators = annotation_set.annotators
    if len(annotators) <= 1:
        return 0
    scores = []
    for i, a in enumerate(annotators):
        f1s = [f1_at(a, b, annotation_set.duration, threshold)[2]
               for j, b in enumerate(annotators) if j != i]
        scores.append(float(np.mean(f1s)))
    return int(np.argmax(scores))


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    aggregation: str
    per_video: list[VideoEval] = field(default_factory=list)

    @property
    def avg_f1(self) -> float:
        return float(np.mean(self.f1)) if self.f1 else 0.0

    def f1_at(self, threshold: float) -> float:
        for t, f in zip(self.thresholds, self.f1):
            if abs(t - threshold) < 1e-9:
                return f
        raise KeyError(threshold)

    def to_dict(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "thresholds": [round(t, 6) for t in self.thresholds],
            "precision": [round(x, 6) for x in self.precision],
            "recall": [round(x, 6) for x in self.recall],
            "f1": [round(x, 6) for x in self.f1],
            "avg_f1": round(self.avg_f1, 6),
            "per_video": [
                {"video_id": v.video_id,
                 "f1": [round(v.rows[t][6], 6) for t in self.thresholds],
                 "annotator": [v.rows[t][0] for t in self.thresholds]}
                for v in self.per_video
            ],
        }

    def to_csv(self) -> str:
        header = ["Rel.Dis"] + [f"{t:.2f}" for t in self.thresholds] + ["avg"]
        row = ["F1"] + [f"{f:.3f}" for f in self.f1] + [f"{self.avg_f1:.3f}"]
        return ",".join(header) + "\n" + ",".join(row) + "\n"


def evaluate_corpus(predictions: dict[str, Sequence[float]], annotations: dict,
                    thresholds=DEFAULT_THRESHOLDS, aggregation="micro",
                    greedy=False) -> EvalReport:
    """Evaluate ``{video_id: boundaries_sec}`` against ``{video_id: AnnotationSet}``.

    ``micro`` pools matched/detected/truth counts over videos (default);
    ``macro`` averages per-video precision, recall and F1. Videos without a
    prediction count as empty detection lists.
    """
    if aggregation not in ("micro", "macro"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    per_video = [evaluate_multi_annotator(list(predictions.get(vid, [])), ann, thresholds, greedy)
                 for vid, ann in sorted(annotations.items())]
    P, R, F = [], [], []
    for thr in thresholds:
        rows = [v.rows[thr] for v in per_video]
        if aggregation == "micro":
            p, r, f = prf(sum(x[1] for x in rows), sum(x[2] for x in rows), sum(x[3] for x in rows))
        else:
            p, r, f = (float(np.mean([x[i] for x in rows])) if rows else 0.0 for i in (4, 5, 6))
        P.append(p)
        R.append(r)
        F.append(f)
    return EvalReport(tuple(thresholds), P, R, F, aggregation, per_video)
