"""Candidate selection: threshold filtering, score-weighted averaging of
the survivors, argmax fallback when nothing survives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .traj_data import ActionChunk


@dataclass
class ScoredCandidates:
    """Pooled candidate chunks with their verifier scores and the
    retention threshold."""

    candidates: list
    scores: list
    threshold: float


@dataclass
class SelectionReport:
    retained_count: int
    used_fallback: bool


def select_action(scored):
    """Pick one action from scored candidates.

    Candidates with score strictly above the threshold are retained; the
    result is their score-weighted average (weights are the retained
    scores normalized to sum to one). If nothing clears the threshold, the
    single highest-scoring candidate is returned unchanged, ties broken by
    lowest index. With a negative finite threshold the retained scores are
    shifted by -threshold + 1e-9 before normalizing so weights stay
    positive; with threshold = -inf the shift anchors at the minimum
    retained score instead.

    Arithmetic is deliberately elementary (left-to-right accumulation) so
    an independent scalar reimplementation reproduces it bit for bit.
    """
    candidates = list(scored.candidates)
    scores = [float(s) for s in scored.scores]
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) != len(scores):
        raise ValueError(
            f"{len(candidates)} candidates but {len(scores)} scores"
        )
    for s in scores:
        if not math.isfinite(s):
            raise ValueError(f"non-finite candidate score {s}")

    theta = float(scored.threshold)
    retained = [i for i, s in enumerate(scores) if s > theta]

    if not retained:
        best = 0
        for i in range(1, len(scores)):
            if scores[i] > scores[best]:
                best = i
        return candidates[best], SelectionReport(retained_count=0, used_fallback=True)

    if theta >= 0.0:
        shift = 0.0
    elif math.isfinite(theta):
        shift = -theta + 1e-9
    else:
        shift = -min(scores[i] for i in retained) + 1e-9

    total = 0.0
    for i in retained:
        total += scores[i] + shift

    flat = np.zeros_like(candidates[0].flat)
    for i in retained:
        w = (scores[i] + shift) / total
        flat += w * candidates[i].flat
    return ActionChunk(flat), SelectionReport(
        retained_count=len(retained), used_fallback=False
    )
