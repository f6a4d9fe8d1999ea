"""Open-vocabulary localization over the mapping dictionary.

Relevancy between an image embedding and a query embedding is the minimum
pairwise softmax against a set of canonical phrase embeddings. Localization
runs in two steps: the best-scoring record overall is the preliminary
target; when a part-kind query lands on an object record, its parts are
re-scored with the parent's phrase added to the canonical set and the best
part wins. Rendered feature frames decode to pixel masks by per-channel
tolerance bands, so repeated queries at a fixed view never re-render.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import LEVEL_OBJECT, LEVEL_PART, check_unit
from .mapping import MappingDictionary, TargetRecord

CANONICAL_PHRASES = ("object", "stuff", "texture")
AUTO_PART_MARGIN = 0.05


@dataclass(frozen=True)
class Query:
    text: str
    embedding: np.ndarray
    level_hint: str = "auto"  # object | part | auto

    def __post_init__(self):
        check_unit(self.embedding)
        if self.level_hint not in ("object", "part", "auto"):
            raise ValueError(f"bad level hint {self.level_hint!r}")


@dataclass
class RelevancyContext:
    canonical: list[np.ndarray]

    def __post_init__(self):
        if not self.canonical:
            raise ValueError("canonical embedding set must be non-empty")
        for vec in self.canonical:
            check_unit(vec)

    @classmethod
    def from_provider(cls, provider, phrases=CANONICAL_PHRASES) -> "RelevancyContext":
        return cls(canonical=[provider.embed_text(p) for p in phrases])

    def augmented(self, extra: np.ndarray) -> "RelevancyContext":
        return RelevancyContext(canonical=self.canonical + [extra])


@dataclass
class QueryResult:
    target_id: int
    level: int
    relevancy: float
    path: str  # "step1" | "step2"
    mask: np.ndarray | None = None
    fallback: bool = False  # set when step 2 found an object without parts


def relevancy(
    phi_img: np.ndarray, phi_query: np.ndarray, ctx: RelevancyContext
) -> float:
    """min_i exp(img.query) / (exp(img.canon_i) + exp(img.query))."""
    img = np.asarray(phi_img, dtype=np.float64)
    q = np.asarray(phi_query, dtype=np.float64)
    if img.shape != q.shape:
        raise ValueError("image/query embedding dimensions differ")
    dot_q = float(img @ q)
    worst = -np.inf
    for canon in ctx.canonical:
        if canon.shape != img.shape:
            raise ValueError("canonical embedding dimension mismatch")
        worst = max(worst, float(img @ np.asarray(canon, dtype=np.float64)))
    # min over canonicals = the sigmoid against the largest canonical logit
    return float(1.0 / (1.0 + np.exp(worst - dot_q)))


def _scores(
    records: list[TargetRecord], query_emb: np.ndarray, ctx: RelevancyContext
) -> list[tuple[float, TargetRecord]]:
    return [(relevancy(r.effective_embedding, query_emb, ctx), r) for r in records]


def _argmax(scored: list[tuple[float, TargetRecord]]) -> tuple[float, TargetRecord]:
    # Highest relevancy wins; ascending id breaks ties deterministically.
    best_score, best = scored[0]
    for score, rec in scored[1:]:
        if score > best_score or (score == best_score and rec.id < best.id):
            best_score, best = score, rec
    return best_score, best


def preliminary_localize(
    dictionary: MappingDictionary, query_emb: np.ndarray, ctx: RelevancyContext
) -> tuple[int, float]:
    """Best-scoring record over the whole dictionary (any level)."""
    if len(dictionary) == 0:
        raise ValueError("empty mapping dictionary")
    records = [dictionary.records[tid] for tid in dictionary.ids()]
    score, best = _argmax(_scores(records, query_emb, ctx))
    return best.id, score


def classify_query_level(
    dictionary: MappingDictionary,
    query_emb: np.ndarray,
    ctx: RelevancyContext,
    preliminary_id: int,
) -> str:
    """Conservative part/object call when no explicit hint is given.

    Part iff the preliminary winner is a part, or dropping the winner leaves
    a part record within AUTO_PART_MARGIN of the winning relevancy.
    """
    winner = dictionary.get(preliminary_id)
    if winner.level == LEVEL_PART:
        return "part"
    rest = [r for r in dictionary.records.values() if r.id != preliminary_id]
    if not rest:
        return "object"
    win_score = relevancy(winner.effective_embedding, query_emb, ctx)
    runner_score, runner = _argmax(_scores(rest, query_emb, ctx))
    if runner.level == LEVEL_PART and win_score - runner_score <= AUTO_PART_MARGIN:
        return "part"
    return "object"


def resolve_target(
    dictionary: MappingDictionary,
    query: Query,
    ctx: RelevancyContext,
    text_embedder=None,
    preliminary: tuple[int, float] | None = None,
) -> QueryResult:
    """Two-step localization from a preliminary winner.

    Step 1 accepts the preliminary for object-kind queries, or for part-kind
    queries already won by a part. Step 2 restricts to the winning object's
    parts, adds the object's phrase embedding (label text if available and a
    text embedder is given, else its image embedding) to the canonical set,
    and takes the best part.
    """
    if preliminary is None:
        preliminary = preliminary_localize(dictionary, query.embedding, ctx)
    prelim_id, prelim_score = preliminary
    prelim = dictionary.get(prelim_id)

    kind = query.level_hint
    if kind == "auto":
        kind = classify_query_level(dictionary, query.embedding, ctx, prelim_id)

    if kind == "object" or prelim.level == LEVEL_PART:
        return QueryResult(
            target_id=prelim.id, level=prelim.level, relevancy=prelim_score, path="step1"
        )

    # Step 2: part-kind query won by an object record.
    parts = [
        r
        for r in dictionary.records.values()
        if r.level == LEVEL_PART and r.parent_id == prelim.id
    ]
    if not parts:
        return QueryResult(
            target_id=prelim.id,
            level=prelim.level,
            relevancy=prelim_score,
            path="step2",
            fallback=True,
        )
    if prelim.label and text_embedder is not None:
        phrase = text_embedder.embed_text(prelim.label)
    else:
        phrase = prelim.raw_embedding
    ctx2 = ctx.augmented(phrase)
    score, best = _argmax(_scores(parts, query.embedding, ctx2))
    return QueryResult(
        target_id=best.id, level=best.level, relevancy=score, path="step2"
    )


def top_k_query(
    dictionary: MappingDictionary,
    query: Query,
    ctx: RelevancyContext,
    k: int,
    text_embedder=None,
) -> list[QueryResult]:
    """k best resolved targets, deduplicated by id, descending relevancy."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(dictionary) == 0:
        raise ValueError("empty mapping dictionary")
    records = [dictionary.records[tid] for tid in dictionary.ids()]
    scored = _scores(records, query.embedding, ctx)
    scored.sort(key=lambda sr: (-sr[0], sr[1].id))
    results: list[QueryResult] = []
    seen: set[int] = set()
    for score, rec in scored:
        if len(results) == k:
            break
        res = resolve_target(
            dictionary, query, ctx, text_embedder=text_embedder,
            preliminary=(rec.id, score),
        )
        if res.target_id in seen:
            continue
        seen.add(res.target_id)
        results.append(res)
    results.sort(key=lambda r: (-r.relevancy, r.target_id))
    return results


def decode_mask(frame: np.ndarray, code: np.ndarray, t: float) -> np.ndarray:
    """Pixels whose feature sits within the per-channel tolerance band."""
    f = np.asarray(frame, dtype=np.float64)
    c = np.asarray(code, dtype=np.float64)
    return (np.abs(f - c) <= t).all(axis=2)


def decode_ids(
    frame: np.ndarray, dictionary: MappingDictionary, level: int, t: float
) -> np.ndarray:
    """Per-pixel id raster; 0 where no code matches within tolerance.

    Codes are spaced more than 2t apart per the dictionary invariant, so at
    most one code can match a pixel.
    """
    h, w = frame.shape[:2]
    out = np.zeros((h, w), dtype=np.int32)
    for tid, code in dictionary.code_table(level).items():
        out[decode_mask(frame, code, t)] = tid
    return out
