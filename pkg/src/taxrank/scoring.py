"""Ranking metrics: similarity, majority vote, weighted score, ground-truth accuracy."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Protocol, Sequence

import numpy as np

from .exceptions import ScoringError, ValidationError
from .policy import to_cents

log = logging.getLogger(__name__)

SCORE_COLUMNS = ["candidate_id", "similarity", "majority_vote", "weighted", "ground_truth_matches", "ground_truth_total"]
TOLERANCE_COLUMNS = ["candidate_id", "delta", "accuracy"]


# ---------------------------------------------------------------------------
# Tokens and embeddings

_WORD = re.compile(r"[A-Za-z0-9]+")
_SUBWORD = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+")


def tokenize(text: str) -> list[str]:
    """Split on whitespace/punctuation, then on underscores and case boundaries."""
    tokens = []
    for word in _WORD.findall(text):
        tokens.extend(piece.lower() for piece in _SUBWORD.findall(word))
    return tokens


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        """Return an array of shape (len(tokens), dim)."""


class HashedTrigramEmbedding:
    """Each token is the L2-normalised sum of hashed character-trigram one-hots."""

    def __init__(self, dim: int = 256):
        if dim < 8:
            raise ValidationError("embedding dimension must be >= 8")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            vec = np.zeros(self.dim)
            padded = f"<{token}>"
            for i in range(max(1, len(padded) - 2)):
                digest = hashlib.blake2b(padded[i:i + 3].encode("utf-8"), digest_size=8).digest()
                vec[int.from_bytes(digest, "little") % self.dim] += 1.0
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self._vector(t) for t in tokens])


class HttpEmbeddingProvider:
    """Embeddings from an HTTP endpoint.

    POSTs ``{"tokens": [...]}`` and expects ``{"vectors": [[...], ...]}`` with one
    vector of length ``dim`` per token.
    """

    def __init__(self, endpoint: str, dim: int, timeout_s: float = 30.0, token: str | None = None):
        if dim < 8:
            raise ValidationError("embedding dimension must be >= 8")
        self.endpoint = endpoint
        self.dim = dim
        self.timeout_s = timeout_s
        self.token = token

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        body = json.dumps({"tokens": list(tokens)}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ScoringError(f"embedding endpoint {self.endpoint} failed: {exc}") from exc
        try:
            vectors = np.asarray(payload["vectors"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScoringError(f"malformed embedding response: {exc}") from exc
        if vectors.shape != (len(tokens), self.dim) or not np.all(np.isfinite(vectors)):
            raise ScoringError(f"embedding response has shape {vectors.shape}, expected {(len(tokens), self.dim)}")
        return vectors


def _normalise(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def similarity_score(source_text: str, references: Sequence[str], provider: EmbeddingProvider | None = None) -> float:
    """Greedy-matching token F1 between a candidate and the concatenated references."""
    if not source_text or not source_text.strip():
        raise ValidationError("candidate source text is empty")
    if not references:
        raise ValidationError("at least one reference text is required")
    provider = provider or HashedTrigramEmbedding()
    cand_tokens = tokenize(source_text)
    ref_tokens = [t for ref in references for t in tokenize(ref)]
    if not cand_tokens or not ref_tokens:
        return 0.0
    try:
        cand = np.asarray(provider.embed(cand_tokens), dtype=float)
        ref = np.asarray(provider.embed(ref_tokens), dtype=float)
    except ScoringError:
        raise
    except Exception as exc:
        raise ScoringError(f"embedding provider failed: {exc}") from exc
    if cand.shape[0] != len(cand_tokens) or ref.shape[0] != len(ref_tokens):
        raise ScoringError("embedding provider returned the wrong number of vectors")
    sims = _normalise(cand) @ _normalise(ref).T
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    if precision + recall <= 0:
        return 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return min(1.0, max(0.0, round(f1, 12)))


# ---------------------------------------------------------------------------
# Majority vote


def _modal_members(cents: list[tuple[int, int]], tolerance: int) -> set[int]:
    """Indices belonging to a largest agreement class among (value, index) pairs."""
    if not cents:
        return set()
    ordered = sorted(cents)
    classes = [[ordered[0]]]
    for value, idx in ordered[1:]:
        if value - classes[-1][-1][0] <= tolerance:
            classes[-1].append((value, idx))
        else:
            classes.append([(value, idx)])
    biggest = max(len(c) for c in classes)
    return {idx for c in classes if len(c) == biggest for _, idx in c}


def majority_vote_scores(matrix, cent_tolerance: int = 0) -> dict[str, float]:
    """Fraction of input columns on which each candidate sits in a modal output class.

    Outputs compare in whole cents; with ``cent_tolerance > 0`` values whose
    sorted neighbours are within the tolerance chain into one class. Non-Ok
    cells never score.
    """
    ids = list(matrix.candidate_ids)
    n = matrix.n_profiles
    if not ids or n == 0:
        raise ValidationError("outcome matrix is empty")
    if cent_tolerance < 0:
        raise ValidationError("cent_tolerance must be >= 0")
    points = dict.fromkeys(ids, 0)
    for j in range(n):
        column = [(to_cents(o.net), i) for i, o in enumerate(matrix.column(j)) if o.ok]
        for i in _modal_members(column, cent_tolerance):
            points[ids[i]] += 1
    return {cid: points[cid] / n for cid in ids}


# ---------------------------------------------------------------------------
# Weighted score


@dataclass(frozen=True)
class Weights:
    w_sim: float = 0.6
    w_mv: float = 0.4

    def __post_init__(self):
        if not (0 <= self.w_sim <= 1 and 0 <= self.w_mv <= 1):
            raise ValidationError("weights must lie in [0, 1]")
        if abs(self.w_sim + self.w_mv - 1.0) > 1e-9:
            raise ValidationError(f"weights must sum to 1, got {self.w_sim} + {self.w_mv}")

    @classmethod
    def parse(cls, text: str) -> "Weights":
        try:
            sim, mv = (float(x) for x in text.split(","))
        except ValueError:
            raise ValidationError(f"weights must look like '0.6,0.4', got {text!r}") from None
        return cls(sim, mv)

    def combine(self, similarity: float, majority_vote: float) -> float:
        return self.w_sim * similarity + self.w_mv * majority_vote


def round_half_up(value: float, places: int = 3) -> float:
    # Trim binary noise first so 0.60795 rounds as written.
    exact = Decimal(repr(round(value, 10)))
    return float(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def weighted_score(similarity: float, majority_vote: float, weights: Weights = Weights()) -> float:
    """Convex combination of the two scores, reported at three decimals."""
    for name, v in (("similarity", similarity), ("majority_vote", majority_vote)):
        if not 0 <= v <= 1:
            raise ValidationError(f"{name} must lie in [0, 1], got {v}")
    return round_half_up(weights.combine(similarity, majority_vote), 3)


# ---------------------------------------------------------------------------
# Ground truth and tolerance curves


def delta_grid(delta_max: float = 0.10, step: float = 0.005) -> list[float]:
    """0 to ``delta_max`` inclusive in ``step`` increments."""
    if delta_max < 0 or step <= 0:
        raise ValidationError("delta_max must be >= 0 and step > 0")
    n = int(round(delta_max / step))
    return [round(i * step, 10) for i in range(n + 1)]


def ground_truth_curve(outcomes: Sequence, oracle: Sequence[float], grid: Sequence[float] | None = None):
    """Accuracy at each relative tolerance in ``grid``.

    A cell counts as correct at tolerance d when it is Ok and
    |candidate - oracle| <= d * max(|oracle|, $1). Returns ``(curve, matches)``
    where ``matches`` is the exact (d = 0) count.
    """
    grid = list(delta_grid() if grid is None else grid)
    if len(outcomes) != len(oracle):
        raise ValidationError(f"{len(outcomes)} outcomes vs {len(oracle)} oracle values")
    if not outcomes:
        raise ValidationError("no outcomes to score")
    if not grid or grid[0] != 0 or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("delta grid must be ascending and start at 0")
    oracle_c = np.array([to_cents(v) for v in oracle], dtype=float)
    ok = np.array([o.ok for o in outcomes])
    cand_c = np.array([to_cents(o.net) if o.ok else 0 for o in outcomes], dtype=float)
    diff = np.abs(cand_c - oracle_c)
    scale = np.maximum(np.abs(oracle_c), 100.0)
    curve = []
    for d in grid:
        hit = ok & (diff <= d * scale * (1 + 1e-12))
        curve.append((float(d), float(hit.mean())))
    matches = int((ok & (diff == 0)).sum())
    return curve, matches


# ---------------------------------------------------------------------------
# Score cards and ranking


@dataclass
class ScoreCard:
    candidate_id: str
    similarity: float
    majority_vote: float
    weighted: float
    ground_truth_matches: int = 0
    ground_truth_total: int = 0
    tolerance_curve: list = field(default_factory=list)
    error: str | None = None

    @property
    def ground_truth(self) -> float:
        return self.ground_truth_matches / self.ground_truth_total if self.ground_truth_total else 0.0

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "similarity": self.similarity,
            "majority_vote": self.majority_vote,
            "weighted": self.weighted,
            "ground_truth_matches": self.ground_truth_matches,
            "ground_truth_total": self.ground_truth_total,
            "tolerance_curve": [[d, a] for d, a in self.tolerance_curve],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreCard":
        data = dict(data)
        data["tolerance_curve"] = [tuple(x) for x in data.get("tolerance_curve", [])]
        return cls(**data)


def rank(cards: Sequence[ScoreCard]) -> list[ScoreCard]:
    """Descending weighted score; ties go to majority vote, then similarity, then id."""
    if not cards:
        raise ValidationError("nothing to rank")
    ids = [c.candidate_id for c in cards]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate candidate ids in score cards")
    return sorted(cards, key=lambda c: (-c.weighted, -c.majority_vote, -c.similarity, c.candidate_id))


def score_pool(
    pool,
    matrix,
    oracle: Sequence[float],
    references: Sequence[str],
    provider: EmbeddingProvider | None = None,
    weights: Weights = Weights(),
    grid: Sequence[float] | None = None,
    cent_tolerance: int = 0,
) -> list[ScoreCard]:
    """Score every candidate in ``pool`` and return the cards ranked."""
    provider = provider or HashedTrigramEmbedding()
    mv = majority_vote_scores(matrix, cent_tolerance)
    cards = []
    for cand in pool:
        error = None
        try:
            sim = similarity_score(cand.source_text, references, provider)
        except (ScoringError, ValidationError) as exc:
            log.warning("similarity failed for %s: %s", cand.id, exc)
            sim, error = 0.0, str(exc)
        curve, matches = ground_truth_curve(matrix.row(cand.id), oracle, grid)
        cards.append(ScoreCard(
            candidate_id=cand.id,
            similarity=sim,
            majority_vote=mv[cand.id],
            weighted=weights.combine(sim, mv[cand.id]),
            ground_truth_matches=matches,
            ground_truth_total=len(oracle),
            tolerance_curve=curve,
            error=error,
        ))
    return rank(cards)


def _fmt(x: float) -> str:
    return f"{round_half_up(x, 3):.3f}"


def scores_csv(cards: Sequence[ScoreCard]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for c in cards:
        writer.writerow([c.candidate_id, _fmt(c.similarity), _fmt(c.majority_vote), _fmt(c.weighted),
                         c.ground_truth_matches, c.ground_truth_total])
    return buf.getvalue()


def tolerance_csv(cards: Sequence[ScoreCard]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TOLERANCE_COLUMNS)
    for c in cards:
        for d, acc in c.tolerance_curve:
            writer.writerow([c.candidate_id, f"{d:.3f}", f"{acc:.4f}"])
    return buf.getvalue()


def format_table(cards: Sequence[ScoreCard]) -> str:
    """Plain-text table in the column order Versions / CodeBertScore / MajorityVoteScore / WeightedScore / Ground Truth Score."""
    header = ["Versions", "CodeBertScore", "MajorityVoteScore", "WeightedScore", "Ground Truth Score"]
    rows = [[c.candidate_id, _fmt(c.similarity), _fmt(c.majority_vote), _fmt(c.weighted),
             f"{c.ground_truth_matches}/{c.ground_truth_total}"] for c in cards]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines)
