"""Dataset quality metrics: topic alignment, judged scores, grounding.

Domain alignment compares the corpus topic distribution against the
dataset's topic distribution with Jensen-Shannon divergence (base-2 logs,
so the value lives in [0, 1]).  Faithfulness and relevance come from a
judge prompt; visual grounding from a yes/no judge over units whose
contexts contain images.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

from .corpus import Chunk
from .errors import BucketMismatch, EmptyInput, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse
from .qa import QAUnit, context_block
from .topics import CorpusProfile

logger = logging.getLogger(__name__)

_FAITHFULNESS_RE = re.compile(r"Faithfulness:\s*(\d+(?:\.\d+)?)")
_RELEVANCE_RE = re.compile(r"Relevance:\s*(\d+(?:\.\d+)?)")
_GROUNDING_RE = re.compile(r"\b(GROUNDED|NOT_GROUNDED)\b")


@dataclass(frozen=True)
class TopicDistribution:
    """A probability distribution over topic ids."""

    buckets: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        probs = dict(self.buckets)
        total = sum(probs.values())
        if abs(total - 1.0) > 1e-9:
            raise EmptyInput(f"distribution sums to {total}, not 1")
        if any(p < 0 for p in probs.values()):
            raise EmptyInput("negative probability in distribution")

    @classmethod
    def from_counts(cls, counts: dict[int, float]) -> "TopicDistribution":
        total = sum(counts.values())
        if total <= 0:
            raise EmptyInput("cannot normalize an all-zero count vector")
        return cls(
            buckets=tuple(sorted((k, v / total) for k, v in counts.items()))
        )

    def as_dict(self) -> dict[int, float]:
        return dict(self.buckets)


def corpus_topic_distribution(profile: CorpusProfile) -> TopicDistribution:
    """Cluster mass over total chunks, one bucket per cluster id."""
    counts = {c.id: float(c.mass) for c in profile.clusters}
    return TopicDistribution.from_counts(counts)


def unit_topic(unit: QAUnit, topic_of_chunk: dict[str, int]) -> int:
    """Majority topic over the unit's context chunks; ties take the
    lowest topic id."""
    votes: dict[int, int] = {}
    for cid in unit.context_chunk_ids:
        if cid not in topic_of_chunk:
            raise BucketMismatch(f"chunk {cid!r} is missing a topic assignment")
        topic = topic_of_chunk[cid]
        votes[topic] = votes.get(topic, 0) + 1
    if not votes:
        raise EmptyInput(f"unit {unit.id!r} has no context chunks")
    best = max(votes.values())
    return min(t for t, v in votes.items() if v == best)


def dataset_topic_distribution(
    units: list[QAUnit], profile: CorpusProfile
) -> TopicDistribution:
    """Distribution of unit majority topics over the profile's buckets.

    Every profile cluster contributes a bucket even at zero mass, so the
    corpus and dataset distributions always share a bucket set.
    """
    if not units:
        raise EmptyInput("cannot compute a distribution over zero units")
    topic_of_chunk = profile.topic_of_chunk()
    counts = {c.id: 0.0 for c in profile.clusters}
    for unit in units:
        topic = unit.topic_id
        if topic is None:
            topic = unit_topic(unit, topic_of_chunk)
        if topic not in counts:
            raise BucketMismatch(f"unit topic {topic} is not a profile cluster")
        counts[topic] += 1.0
    return TopicDistribution.from_counts(counts)


def jsd(p: TopicDistribution, q: TopicDistribution) -> float:
    """Jensen-Shannon divergence with base-2 logs; 0 <= jsd <= 1.

    ``0 * log 0`` is taken as 0.  Comparing distributions over different
    bucket sets raises :class:`BucketMismatch`.
    """
    pd, qd = p.as_dict(), q.as_dict()
    if set(pd) != set(qd):
        raise BucketMismatch(
            f"bucket sets differ: {sorted(pd)} vs {sorted(qd)}"
        )

    def kl(a: dict[int, float], m: dict[int, float]) -> float:
        total = 0.0
        for key, prob in a.items():
            if prob > 0.0:
                total += prob * math.log2(prob / m[key])
        return total

    mid = {k: 0.5 * (pd[k] + qd[k]) for k in pd}
    value = 0.5 * kl(pd, mid) + 0.5 * kl(qd, mid)
    return min(1.0, max(0.0, value))


# ---------------------------------------------------------------------------
# judged scores


def parse_judge_scores(raw: str) -> tuple[float, float]:
    faith = _FAITHFULNESS_RE.search(raw)
    rel = _RELEVANCE_RE.search(raw)
    if not (faith and rel):
        raise ProtocolError("judge response is missing Faithfulness or Relevance")
    scores = (float(faith.group(1)), float(rel.group(1)))
    if any(s < 0 or s > 10 for s in scores):
        raise ProtocolError(f"judge scores {scores} outside 0-10")
    return scores[0] / 10.0, scores[1] / 10.0


def judge_scores(
    gateway: ModelGateway,
    unit: QAUnit,
    chunks_by_id: dict[str, Chunk],
) -> tuple[float, float] | None:
    """Faithfulness and relevance on [0, 1], or None when the judge's
    response stays malformed after one re-prompt (the unit is then
    excluded from aggregation, not zeroed)."""
    members = [chunks_by_id[cid] for cid in unit.context_chunk_ids]
    request = ChatRequest(
        template_id="answer_quality_judge",
        variables={
            "content": context_block(members),
            "question": unit.question,
            "answer": unit.answer,
        },
    )
    try:
        scores, _ = complete_with_retry_parse(gateway, request, parse_judge_scores)
        return scores
    except ProtocolError as err:
        logger.warning("judge failed twice for unit %s (%s); excluded", unit.id, err)
        return None


def parse_grounding(raw: str) -> bool:
    match = _GROUNDING_RE.search(raw)
    if not match:
        raise ProtocolError("grounding response has no GROUNDED/NOT_GROUNDED token")
    return match.group(1) == "GROUNDED"


def unit_image_paths(unit: QAUnit, chunks_by_id: dict[str, Chunk]) -> list[str]:
    paths: list[str] = []
    for cid in unit.context_chunk_ids:
        chunk = chunks_by_id.get(cid)
        if chunk:
            paths.extend(p for p in chunk.artifacts if p not in paths)
    return paths


def visual_grounding(
    gateway: ModelGateway,
    unit: QAUnit,
    chunks_by_id: dict[str, Chunk],
) -> bool:
    """Whether the unit's answer genuinely depends on its context images.

    Vacuously False (with no model call) when the context carries no
    image artifacts; such units are excluded from the grounding rate's
    denominator by the aggregator.
    """
    paths = unit_image_paths(unit, chunks_by_id)
    if not paths:
        return False
    request = ChatRequest(
        template_id="visual_grounding_judge",
        variables={"question": unit.question, "answer": unit.answer},
        attachments=tuple(paths),
    )
    try:
        grounded, _ = complete_with_retry_parse(gateway, request, parse_grounding)
        return grounded
    except ProtocolError:
        logger.warning("grounding judge failed twice for unit %s; NOT_GROUNDED", unit.id)
        return False


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class ScoreReport:
    faithfulness: float
    relevance: float
    avg_hops: float
    visual_grounding_rate: float
    multimodal_units: int
    judged_units: int
    total_units: int
    domain_jsd: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "faithfulness": self.faithfulness,
            "relevance": self.relevance,
            "avg_hops": self.avg_hops,
            "visual_grounding_rate": self.visual_grounding_rate,
            "multimodal_units": self.multimodal_units,
            "judged_units": self.judged_units,
            "total_units": self.total_units,
            "domain_jsd": self.domain_jsd,
            "flags": list(self.flags),
        }


def score_dataset(
    gateway: ModelGateway,
    units: list[QAUnit],
    chunks_by_id: dict[str, Chunk],
    profile: CorpusProfile,
    *,
    judge_images: bool = True,
) -> ScoreReport:
    """Judge every unit and aggregate the dataset-level metrics."""
    if not units:
        raise EmptyInput("cannot score an empty dataset")
    flags: list[str] = []
    faith_scores: list[float] = []
    rel_scores: list[float] = []
    for unit in units:
        scores = judge_scores(gateway, unit, chunks_by_id)
        if scores is None:
            flags.append(f"unit {unit.id} excluded from judged scores")
            continue
        faith_scores.append(scores[0])
        rel_scores.append(scores[1])

    multimodal = [u for u in units if unit_image_paths(u, chunks_by_id)]
    grounded = 0
    if judge_images:
        for unit in multimodal:
            if visual_grounding(gateway, unit, chunks_by_id):
                grounded += 1
    else:
        flags.append("visual grounding skipped: images disabled for this run")

    hops = [u.hops for u in units]
    corpus_dist = corpus_topic_distribution(profile)
    dataset_dist = dataset_topic_distribution(units, profile)

    rate = 0.0
    if judge_images and multimodal:
        rate = grounded / len(multimodal)
    elif judge_images:
        flags.append("no multimodal units; grounding rate is vacuous")

    return ScoreReport(
        faithfulness=sum(faith_scores) / len(faith_scores) if faith_scores else 0.0,
        relevance=sum(rel_scores) / len(rel_scores) if rel_scores else 0.0,
        avg_hops=sum(hops) / len(hops),
        visual_grounding_rate=rate,
        multimodal_units=len(multimodal),
        judged_units=len(faith_scores),
        total_units=len(units),
        domain_jsd=jsd(corpus_dist, dataset_dist),
        flags=flags,
    )
