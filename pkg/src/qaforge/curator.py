"""Dataset curation: duplicate discovery, ranked merging, reassembly.

Verified units are grouped twice: first into *question communities*
(connected components of the question-similarity graph), then within
each community into *answer subclusters* using a blended similarity of
answer embeddings and context overlap.  Subclusters whose members are
mutually similar beyond a merge threshold are rewritten by a rank-then-
merge model protocol; everything else passes through verbatim.  Merging
never drops information silently: protocol failures retain the original
units, and merged units carry their full lineage.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse
from .qa import QAUnit, Verdict
from .topics import CorpusProfile

logger = logging.getLogger(__name__)

_PAIR_BLOCK = re.compile(r"<\|#\|>START<\|#\|>(.*?)<\|#\|>END<\|#\|>", re.DOTALL)
_NEXT = "<|#|>NEXT<|#|>"
_SEP = "<|#|>"


@dataclass
class QuestionCommunity:
    """Units whose questions are mutually reachable above the threshold."""

    id: str
    unit_ids: list[str]


@dataclass
class AnswerSubcluster:
    id: str
    unit_ids: list[str]
    min_pairwise_sim: float


@dataclass
class CurationReport:
    communities: int = 0
    subclusters: int = 0
    merge_calls: int = 0
    merged_away: int = 0
    retained_verbatim: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "communities": self.communities,
            "subclusters": self.subclusters,
            "merge_calls": self.merge_calls,
            "merged_away": self.merged_away,
            "retained_verbatim": self.retained_verbatim,
            "flags": list(self.flags),
        }


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv)


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def unit_similarity(
    unit_a: QAUnit,
    unit_b: QAUnit,
    alpha: float,
    answer_embeddings: dict[str, np.ndarray],
) -> float:
    """Blend of answer-embedding cosine and context-id Jaccard overlap.

    ``alpha`` weights the semantic part: ``alpha * cos + (1 - alpha) * J``.
    Symmetric by construction.
    """
    if not 0.0 <= alpha <= 1.0:
        raise EmptyInput(f"alpha {alpha} outside [0, 1]")
    cos = _cos(answer_embeddings[unit_a.id], answer_embeddings[unit_b.id])
    overlap = jaccard(set(unit_a.context_chunk_ids), set(unit_b.context_chunk_ids))
    return alpha * cos + (1.0 - alpha) * overlap


def _connected_components(
    ids: list[str], linked: dict[tuple[str, str], bool]
) -> list[list[str]]:
    """Components of an undirected graph given a pairwise link predicate.

    Component ids follow the smallest member unit id; members are listed
    in input order.
    """
    remaining = list(ids)
    seen: set[str] = set()
    components: list[list[str]] = []
    adjacency: dict[str, list[str]] = {i: [] for i in ids}
    for (a, b), is_linked in linked.items():
        if is_linked:
            adjacency[a].append(b)
            adjacency[b].append(a)
    for start in remaining:
        if start in seen:
            continue
        stack = [start]
        group: set[str] = set()
        while stack:
            node = stack.pop()
            if node in group:
                continue
            group.add(node)
            stack.extend(n for n in adjacency[node] if n not in group)
        seen |= group
        components.append([i for i in ids if i in group])
    components.sort(key=lambda group: min(group))
    return components


def question_communities(
    units: list[QAUnit],
    question_embeddings: dict[str, np.ndarray],
    threshold: float,
) -> list[QuestionCommunity]:
    """Connected components of the question-cosine graph."""
    ids = [u.id for u in units]
    linked: dict[tuple[str, str], bool] = {}
    for i, a in enumerate(units):
        for b in units[i + 1 :]:
            cos = _cos(question_embeddings[a.id], question_embeddings[b.id])
            linked[(a.id, b.id)] = cos >= threshold
    return [
        QuestionCommunity(id=f"qc-{min(group)}", unit_ids=group)
        for group in _connected_components(ids, linked)
    ]


def answer_subclusters(
    community: QuestionCommunity,
    units_by_id: dict[str, QAUnit],
    alpha: float,
    link_threshold: float,
    answer_embeddings: dict[str, np.ndarray],
) -> list[AnswerSubcluster]:
    """Split a community by blended answer/context similarity.

    ``min_pairwise_sim`` records the weakest similarity inside each
    subcluster (1.0 for singletons by convention); the merge decision
    compares it against the merge threshold later.
    """
    ids = community.unit_ids
    sims: dict[tuple[str, str], float] = {}
    linked: dict[tuple[str, str], bool] = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            sim = unit_similarity(
                units_by_id[a], units_by_id[b], alpha, answer_embeddings
            )
            sims[(a, b)] = sim
            linked[(a, b)] = sim >= link_threshold
    out = []
    for group in _connected_components(ids, linked):
        if len(group) == 1:
            min_sim = 1.0
        else:
            min_sim = min(
                sims[(a, b)] if (a, b) in sims else sims[(b, a)]
                for i, a in enumerate(group)
                for b in group[i + 1 :]
            )
        out.append(
            AnswerSubcluster(
                id=f"as-{min(group)}", unit_ids=group, min_pairwise_sim=min_sim
            )
        )
    return out


# ---------------------------------------------------------------------------
# merge protocol


def _pairs_block(units: list[QAUnit]) -> str:
    parts = []
    for unit in units:
        parts.append(f"Question<|#|>{unit.question}<|#|>Answer<|#|>{unit.answer}")
    return "\n".join(parts)


def parse_pair_records(raw: str) -> list[tuple[str, str]]:
    """Parse Question/Answer records between START and END markers."""
    block = _PAIR_BLOCK.search(raw)
    if not block:
        raise ProtocolError("no START/END block in pair-protocol response")
    pairs = []
    for record in block.group(1).split(_NEXT):
        record = record.strip()
        if not record:
            raise ProtocolError("empty record in pair-protocol response")
        fields = [f.strip() for f in record.split(_SEP)]
        if len(fields) != 4 or fields[0] != "Question" or fields[2] != "Answer":
            raise ProtocolError(
                f"malformed pair record (got {len(fields)} fields)"
            )
        if not fields[1] or not fields[3]:
            raise ProtocolError("pair record with empty question or answer")
        pairs.append((fields[1], fields[3]))
    if not pairs:
        raise ProtocolError("pair-protocol response contained no records")
    return pairs


def _rank_units(
    gateway: ModelGateway, units: list[QAUnit], profile: CorpusProfile
) -> list[QAUnit]:
    """Reorder units via the rank protocol; must be a verbatim permutation."""
    request = ChatRequest(
        template_id="deduplication_rank",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "candidates": _pairs_block(units),
        },
    )

    def parse_permutation(raw: str) -> list[QAUnit]:
        pairs = parse_pair_records(raw)
        remaining = list(units)
        ordered = []
        for question, answer in pairs:
            match = next(
                (u for u in remaining if u.question == question and u.answer == answer),
                None,
            )
            if match is None:
                raise ProtocolError("rank response altered or invented a pair")
            ordered.append(match)
            remaining.remove(match)
        if remaining:
            raise ProtocolError("rank response dropped pairs")
        return ordered

    ordered, _ = complete_with_retry_parse(gateway, request, parse_permutation)
    return ordered


def refine(
    gateway: ModelGateway,
    subcluster: AnswerSubcluster,
    units_by_id: dict[str, QAUnit],
    profile: CorpusProfile,
    merge_threshold: float,
    report: CurationReport,
) -> list[QAUnit]:
    """Merge a subcluster's units when they are near-duplicates.

    Merging requires ``min_pairwise_sim`` strictly above the threshold;
    singletons and weakly similar groups pass through verbatim.  The rank
    protocol orders candidates first, then the merge protocol rewrites
    them; each merged unit carries every source id in ``lineage`` and the
    union of source contexts.  If either protocol stays malformed after
    one re-prompt, the originals are retained.
    """
    units = [units_by_id[uid] for uid in subcluster.unit_ids]
    if len(units) == 1 or subcluster.min_pairwise_sim <= merge_threshold:
        report.retained_verbatim += len(units)
        return units

    try:
        ranked = _rank_units(gateway, units, profile)
    except ProtocolError as err:
        report.flags.append(
            f"rank protocol failed for subcluster {subcluster.id}: {err}"
        )
        report.retained_verbatim += len(units)
        return units

    request = ChatRequest(
        template_id="deduplication_merge",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "candidates": _pairs_block(ranked),
        },
    )
    report.merge_calls += 1
    try:
        pairs, _ = complete_with_retry_parse(gateway, request, parse_pair_records)
    except ProtocolError as err:
        report.flags.append(
            f"merge protocol failed for subcluster {subcluster.id}: {err}"
        )
        report.retained_verbatim += len(units)
        return units

    lineage = [u.id for u in ranked]
    context_union: list[str] = []
    decomposition = []
    for unit in ranked:
        decomposition.extend(unit.decomposition)
        context_union.extend(
            cid for cid in unit.context_chunk_ids if cid not in context_union
        )
    merged_units = []
    for n, (question, answer) in enumerate(pairs, start=1):
        merged_units.append(
            QAUnit(
                id=f"{subcluster.id}-m{n}",
                question=question,
                answer=answer,
                # A merged pair spans its sources, so it inherits their
                # strongest scores.
                relevance=max(u.relevance for u in ranked),
                difficulty=max(u.difficulty for u in ranked),
                seed_chunk_id=ranked[0].seed_chunk_id,
                context_chunk_ids=context_union,
                decomposition=list(dict.fromkeys(decomposition)),
                verdict=Verdict(
                    question_ok=True,
                    answer_ok=True,
                    requires_content=True,
                    justification="merged from individually verified units",
                ),
                lineage=lineage,
            )
        )
    report.merged_away += len(units) - len(merged_units)
    return merged_units


def curate(
    gateway: ModelGateway,
    units: list[QAUnit],
    profile: CorpusProfile,
    *,
    alpha: float = 0.7,
    question_threshold: float = 0.80,
    link_threshold: float = 0.75,
    merge_threshold: float = 0.85,
) -> tuple[list[QAUnit], CurationReport]:
    """Full curation pass; returns final units with fresh sequential ids."""
    report = CurationReport()
    if not units:
        return [], report

    units_by_id = {u.id: u for u in units}
    if len(units_by_id) != len(units):
        raise EmptyInput("duplicate unit ids entering curation")
    question_vecs = {
        u.id: v.as_array()
        for u, v in zip(units, gateway.embed([u.question for u in units]))
    }
    answer_vecs = {
        u.id: v.as_array()
        for u, v in zip(units, gateway.embed([u.answer for u in units]))
    }

    final: list[QAUnit] = []
    communities = question_communities(units, question_vecs, question_threshold)
    report.communities = len(communities)
    for community in communities:
        subclusters = answer_subclusters(
            community, units_by_id, alpha, link_threshold, answer_vecs
        )
        report.subclusters += len(subclusters)
        for subcluster in subclusters:
            final.extend(
                refine(
                    gateway, subcluster, units_by_id, profile, merge_threshold, report
                )
            )

    for n, unit in enumerate(final, start=1):
        unit.id = f"qa-{n:04d}"
    return final, report
