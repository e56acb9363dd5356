"""Corpus profiling: topic clusters, keywords, and the expert persona.

The corpus is profiled by projecting chunk embeddings to a few principal
components, density-clustering the projected points, scoring cluster
keywords with class-based TF-IDF, diversifying them with maximal marginal
relevance, and finally asking a model to name the domain and the expert
persona that the clustered keywords imply.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, EmptyInput, ProfileError, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse
from .templates import GENERIC_DOMAIN, GENERIC_PERSONA

logger = logging.getLogger(__name__)

OUTLIER_CLUSTER_ID = -1

_TOKEN = re.compile(r"[a-z][a-z0-9_-]+")
_STOPWORDS = frozenset(
    """a an and are as at be by for from has have in is it its of on or that the
    this to was were will with not but they them their then than which who whom
    these those such into over under between during each both more most other
    some can could should would may might must do does did done being been
    there here when where why how all any no nor only own same so too very s t
    just now also after before about against above below up down out off again
    further once if while because until""".split()
)


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN.findall(text.lower()) if t not in _STOPWORDS]


@dataclass
class TopicCluster:
    id: int
    member_chunk_ids: list[str]
    keywords: list[tuple[str, float]] = field(default_factory=list)

    @property
    def mass(self) -> int:
        return len(self.member_chunk_ids)

    @property
    def is_outlier_bucket(self) -> bool:
        return self.id == OUTLIER_CLUSTER_ID


@dataclass
class CorpusProfile:
    domain: str
    persona: str
    clusters: list[TopicCluster]
    zero_variance: bool = False
    synthesized: bool = True

    def topic_of_chunk(self) -> dict[str, int]:
        mapping: dict[str, int] = {}
        for cluster in self.clusters:
            for cid in cluster.member_chunk_ids:
                mapping[cid] = cluster.id
        return mapping

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "persona": self.persona,
            "zero_variance": self.zero_variance,
            "synthesized": self.synthesized,
            "clusters": [
                {
                    "id": c.id,
                    "member_chunk_ids": list(c.member_chunk_ids),
                    "keywords": [[t, s] for t, s in c.keywords],
                }
                for c in self.clusters
            ],
        }

    @classmethod
    def from_dict(cls, row: dict) -> "CorpusProfile":
        return cls(
            domain=row["domain"],
            persona=row["persona"],
            zero_variance=row.get("zero_variance", False),
            synthesized=row.get("synthesized", True),
            clusters=[
                TopicCluster(
                    id=c["id"],
                    member_chunk_ids=list(c["member_chunk_ids"]),
                    keywords=[(t, float(s)) for t, s in c.get("keywords", [])],
                )
                for c in row["clusters"]
            ],
        )


# ---------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class ProjectionResult:
    points: np.ndarray
    zero_variance: bool


def project(vectors, dimensions: int = 5) -> ProjectionResult:
    """Deterministic principal-component projection.

    Components are sign-fixed so their largest-magnitude coordinate is
    positive, which removes the SVD sign ambiguity.  If the data has less
    variance than requested (rank < dimensions) the missing coordinates
    are zero.  Identical input vectors are a legal degenerate case: the
    result is all zeros with ``zero_variance`` set.
    """
    mat = np.asarray(vectors, dtype=float)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmptyInput("projection needs a non-empty 2-d array")
    n = mat.shape[0]
    if dimensions < 1:
        raise DegenerateInput("projection dimension must be >= 1")
    if n < dimensions + 1:
        raise DegenerateInput(
            f"projection to {dimensions} components needs at least "
            f"{dimensions + 1} vectors, got {n}"
        )
    centered = mat - mat.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        return ProjectionResult(np.zeros((n, dimensions)), zero_variance=True)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(singular > 1e-12))
    take = min(dimensions, rank)
    components = vt[:take].copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    points = centered @ components.T
    if take < dimensions:
        points = np.hstack([points, np.zeros((n, dimensions - take))])
    return ProjectionResult(points, zero_variance=False)


# ---------------------------------------------------------------------------
# density clustering


def _cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 and nv == 0.0:
        return 0.0
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return 1.0 - float(np.dot(u, v)) / (nu * nv)


def cluster_density(
    points,
    eps: float,
    min_pts: int,
    ids: list[str] | None = None,
    metric: str = "cosine",
) -> list[TopicCluster]:
    """Density-based clustering with deterministic labels.

    A point is *core* when at least ``min_pts`` points (itself included)
    lie within ``eps``.  Clusters are grown breadth-first from core points
    in input order, so cluster ids are assigned by the order of each
    cluster's first core point.  Points reachable from no core point land
    in the outlier bucket with id -1.  The returned clusters partition the
    input ids.
    """
    mat = np.asarray(points, dtype=float)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmptyInput("clustering needs a non-empty 2-d array")
    if eps < 0 or min_pts < 1:
        raise EmptyInput(f"bad clustering parameters eps={eps} min_pts={min_pts}")
    n = mat.shape[0]
    if ids is None:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise EmptyInput("ids length does not match points")

    if metric == "cosine":
        dist = _cosine_distance
    elif metric == "euclidean":
        def dist(u: np.ndarray, v: np.ndarray) -> float:
            return float(np.linalg.norm(u - v))
    else:
        raise EmptyInput(f"unknown metric {metric!r}")

    neighbors: list[list[int]] = []
    for i in range(n):
        neighbors.append([j for j in range(n) if dist(mat[i], mat[j]) <= eps])
    core = [len(nb) >= min_pts for nb in neighbors]

    labels: dict[int, int] = {}
    next_id = 0
    for i in range(n):
        if i in labels or not core[i]:
            continue
        labels[i] = next_id
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if q in labels:
                    continue
                labels[q] = next_id
                if core[q]:
                    queue.append(q)
        next_id += 1

    members_by_label: dict[int, list[str]] = {}
    for i in range(n):
        label = labels.get(i, OUTLIER_CLUSTER_ID)
        members_by_label.setdefault(label, []).append(ids[i])
    clusters = [
        TopicCluster(id=label, member_chunk_ids=members)
        for label, members in sorted(members_by_label.items())
    ]
    return clusters


# ---------------------------------------------------------------------------
# keywords


def ctfidf(
    clusters: list[TopicCluster], tokens_by_chunk: dict[str, list[str]]
) -> dict[int, list[tuple[str, float]]]:
    """Class-based TF-IDF keyword scores per cluster.

    Each cluster is treated as one document: ``score(t, c) =
    tf(t, c) * log(1 + A / f(t))`` with ``A`` the mean token count per
    cluster and ``f(t)`` the term's total frequency across clusters.
    Scores are returned sorted descending, ties broken alphabetically.
    """
    if not clusters:
        raise EmptyInput("ctfidf needs at least one cluster")
    tf: dict[int, Counter[str]] = {}
    total_tokens = 0
    for cluster in clusters:
        counter: Counter[str] = Counter()
        for cid in cluster.member_chunk_ids:
            counter.update(tokens_by_chunk.get(cid, []))
        tf[cluster.id] = counter
        total_tokens += sum(counter.values())
    overall: Counter[str] = Counter()
    for counter in tf.values():
        overall.update(counter)
    mean_tokens = total_tokens / len(clusters)
    scores: dict[int, list[tuple[str, float]]] = {}
    for cluster in clusters:
        rows = [
            (term, count * math.log(1.0 + mean_tokens / overall[term]))
            for term, count in tf[cluster.id].items()
        ]
        rows.sort(key=lambda row: (-row[1], row[0]))
        scores[cluster.id] = rows
    return scores


def mmr_select(
    candidates: list[tuple[str, float]],
    k: int,
    lam: float,
    embeddings: dict[str, np.ndarray],
) -> list[str]:
    """Greedy maximal-marginal-relevance selection of ``k`` terms.

    Picks ``argmax lam * rel(t) - (1 - lam) * max_{s in S} cos(t, s)``;
    the penalty term is zero while nothing is selected.  Ties break toward
    the higher relevance, then the lexicographically smaller term.  With
    ``lam = 1`` this reduces exactly to relevance-sorted top-k.
    """
    if not 0.0 <= lam <= 1.0:
        raise EmptyInput(f"mmr lambda {lam} outside [0, 1]")
    rel = dict(candidates)
    if len(rel) != len(candidates):
        raise EmptyInput("duplicate terms in mmr candidates")
    pool = list(rel)
    selected: list[str] = []
    while pool and len(selected) < k:
        def combined(term: str) -> float:
            penalty = 0.0
            if selected and lam < 1.0:
                penalty = max(
                    _cos(embeddings[term], embeddings[s]) for s in selected
                )
            return lam * rel[term] - (1.0 - lam) * penalty

        pick = min(pool, key=lambda t: (-combined(t), -rel[t], t))
        selected.append(pick)
        pool.remove(pick)
    return selected


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv)


# ---------------------------------------------------------------------------
# profile synthesis


_DOMAIN_LINE = re.compile(r"Domain:[ \t]*(.+)")
_PERSONA_LINE = re.compile(r"Expert Role:[ \t]*(.+)")
_BLOCK = re.compile(r"<\|#\|>START<\|#\|>(.*?)<\|#\|>END<\|#\|>", re.DOTALL)


def parse_domain_persona(raw: str) -> tuple[str, str]:
    block = _BLOCK.search(raw)
    if not block:
        raise ProtocolError("no START/END block in domain response")
    body = block.group(1)
    domain = _DOMAIN_LINE.search(body)
    persona = _PERSONA_LINE.search(body)
    if not domain or not persona:
        raise ProtocolError("domain response is missing Domain or Expert Role")
    clean = lambda s: s.replace("<|#|>", " ").strip()
    result = (clean(domain.group(1)), clean(persona.group(1)))
    if not result[0] or not result[1]:
        raise ProtocolError("empty Domain or Expert Role value")
    return result


def format_topic_list(clusters: list[TopicCluster], max_topics: int = 12) -> str:
    ranked = sorted(
        (c for c in clusters if not c.is_outlier_bucket),
        key=lambda c: (-c.mass, c.id),
    )[:max_topics]
    lines = []
    for cluster in ranked:
        terms = ", ".join(t for t, _ in cluster.keywords) or "(no keywords)"
        lines.append(f"Topic {cluster.id} ({cluster.mass} chunks): {terms}")
    return "\n".join(lines)


def synthesize_profile(
    gateway: ModelGateway,
    clusters: list[TopicCluster],
    *,
    zero_variance: bool = False,
    no_persona: bool = False,
    max_topics: int = 12,
) -> CorpusProfile:
    """Name the corpus domain and expert persona from the topic keywords.

    A malformed response is re-prompted once; a second failure aborts the
    run (the persona anchors every downstream prompt) unless persona use
    is disabled, in which case generic placeholders stand in.
    """
    if no_persona:
        return CorpusProfile(
            domain=GENERIC_DOMAIN,
            persona=GENERIC_PERSONA,
            clusters=clusters,
            zero_variance=zero_variance,
            synthesized=False,
        )
    if not any(not c.is_outlier_bucket for c in clusters):
        raise ProfileError(
            "no topic clusters survived density clustering; cannot profile "
            "the corpus (consider raising eps or lowering min_pts)"
        )
    request = ChatRequest(
        template_id="domain_and_expert_from_topics",
        variables={"topic_list": format_topic_list(clusters, max_topics)},
    )
    try:
        (domain, persona), _ = complete_with_retry_parse(
            gateway, request, parse_domain_persona
        )
    except ProtocolError as err:
        raise ProfileError(
            f"domain/persona synthesis failed after a re-prompt: {err}"
        ) from err
    return CorpusProfile(
        domain=domain,
        persona=persona,
        clusters=clusters,
        zero_variance=zero_variance,
    )


def build_profile(
    gateway: ModelGateway,
    chunks,
    *,
    dimensions: int = 5,
    eps: float = 0.4,
    min_pts: int = 3,
    mmr_lambda: float = 0.7,
    keywords_per_topic: int = 10,
    no_persona: bool = False,
) -> CorpusProfile:
    """Full profiling pass over embedded chunks."""
    if not chunks:
        raise EmptyInput("cannot profile an empty corpus")
    vectors = []
    for chunk in chunks:
        if chunk.embedding is None:
            raise EmptyInput(f"chunk {chunk.id!r} has no embedding")
        vectors.append(chunk.embedding.as_array())
    projection = project(np.vstack(vectors), dimensions)
    if projection.zero_variance:
        logger.warning("all chunk embeddings identical; topic structure is flat")
    clusters = cluster_density(
        projection.points, eps, min_pts, ids=[c.id for c in chunks]
    )

    tokens_by_chunk = {c.id: tokenize(c.content) for c in chunks}
    scores = ctfidf(clusters, tokens_by_chunk)
    term_vectors: dict[str, np.ndarray] = {}
    for cluster in clusters:
        ranked = scores[cluster.id]
        shortlist = ranked[: max(keywords_per_topic * 3, keywords_per_topic)]
        terms = [t for t, _ in shortlist]
        fresh = [t for t in terms if t not in term_vectors]
        if fresh:
            for term, vec in zip(fresh, gateway.embed(fresh)):
                term_vectors[term] = vec.as_array()
        chosen = mmr_select(shortlist, keywords_per_topic, mmr_lambda, term_vectors)
        score_of = dict(shortlist)
        cluster.keywords = [(t, score_of[t]) for t in chosen]

    return synthesize_profile(
        gateway,
        clusters,
        zero_variance=projection.zero_variance,
        no_persona=no_persona,
    )
