"""Recursive construction of self-contained multi-chunk contexts.

Starting from a seed chunk, the builder repeatedly asks a model whether
the accumulated context is semantically complete; while it is not, the
model's gap-filling queries drive retrieval, retrieved candidates are
reranked, and each surviving candidate is admitted or rejected by a
second verification prompt.  The loop stops when the context is judged
complete, when an iteration admits nothing (``exhausted``), or when the
iteration budget runs out (``budget_stop``).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .corpus import Chunk
from .errors import EmptyInput, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse
from .index import VectorIndex, rerank
from .topics import CorpusProfile

logger = logging.getLogger(__name__)

ADMIT_EXPLANATORY = "EXPLANATORY"
ADMIT_RELATED = "RELATED"
ADMIT_UNRELATED = "UNRELATED"

_STATUS_RE = re.compile(r"Status:\s*(COMPLETE|INCOMPLETE)\b", re.IGNORECASE)
_QUERY_RE = re.compile(r"Query:\s*(.*?)(?:,\s*Explanation:|$)", re.DOTALL)
_VERDICT_RE = re.compile(
    r"Status:\s*(EXPLANATORY|RELATED|UNRELATED)\b", re.IGNORECASE
)


@dataclass
class ExpansionStep:
    """Everything that happened in one loop iteration."""

    queries: list[str]
    evaluations: list[tuple[str, str, str]]  # (query, chunk_id, verdict)
    admitted: list[str]
    completed: bool

    def to_dict(self) -> dict:
        return {
            "queries": list(self.queries),
            "evaluations": [list(e) for e in self.evaluations],
            "admitted": list(self.admitted),
            "completed": self.completed,
        }


@dataclass
class SemanticContext:
    """A seed chunk plus everything admitted while closing its gaps."""

    seed_id: str
    member_ids: list[str]
    status: str  # "complete" | "exhausted" | "budget_stop"
    iterations: int
    trace: list[ExpansionStep] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed_id": self.seed_id,
            "member_ids": list(self.member_ids),
            "status": self.status,
            "iterations": self.iterations,
            "trace": [s.to_dict() for s in self.trace],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "SemanticContext":
        return cls(
            seed_id=row["seed_id"],
            member_ids=list(row["member_ids"]),
            status=row["status"],
            iterations=int(row["iterations"]),
            trace=[
                ExpansionStep(
                    queries=list(s["queries"]),
                    evaluations=[tuple(e) for e in s["evaluations"]],
                    admitted=list(s["admitted"]),
                    completed=bool(s["completed"]),
                )
                for s in row.get("trace", [])
            ],
            flags=list(row.get("flags", [])),
        )


def parse_completeness(raw: str) -> tuple[bool, list[str]]:
    """Parse the completeness protocol line.

    Returns ``(complete, queries)``.  INCOMPLETE must carry at least one
    query; COMPLETE ignores any query text.  Queries are split on ``|``,
    trimmed, and deduplicated preserving order.
    """
    status = _STATUS_RE.search(raw)
    if not status:
        raise ProtocolError("completeness response has no Status field")
    complete = status.group(1).upper() == "COMPLETE"
    if complete:
        return True, []
    query_match = _QUERY_RE.search(raw)
    if not query_match:
        raise ProtocolError("INCOMPLETE response has no Query field")
    queries: list[str] = []
    for part in query_match.group(1).split("|"):
        cleaned = " ".join(part.split())
        if cleaned and cleaned.lower() != "none" and cleaned not in queries:
            queries.append(cleaned)
    if not queries:
        raise ProtocolError("INCOMPLETE response carries no usable queries")
    return False, queries


def parse_admission(raw: str) -> str:
    match = _VERDICT_RE.search(raw)
    if not match:
        raise ProtocolError("admission response has no Status verdict")
    return match.group(1).upper()


def _member_block(members: list[Chunk]) -> str:
    parts = []
    for chunk in members:
        parts.append(f"Chunk {chunk.id}:\n{chunk.content}")
    return "\n\n".join(parts)


def assess_completeness(
    gateway: ModelGateway,
    members: list[Chunk],
    profile: CorpusProfile,
) -> tuple[bool, list[str], bool]:
    """Ask whether the member set stands alone.

    Returns ``(complete, queries, flagged)``.  After a failed re-prompt
    the loop must not spin forever, so the fail-safe verdict is COMPLETE
    with ``flagged=True``.
    """
    if not members:
        raise EmptyInput("cannot assess an empty member set")
    request = ChatRequest(
        template_id="completion_verification",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "seed_id": members[0].id,
            "member_ids": ", ".join(c.id for c in members),
            "content": _member_block(members),
        },
    )
    try:
        (complete, queries), _ = complete_with_retry_parse(
            gateway, request, parse_completeness
        )
        return complete, queries, False
    except ProtocolError as err:
        logger.warning(
            "completeness protocol failed twice for seed %s (%s); "
            "treating context as complete",
            members[0].id,
            err,
        )
        return True, [], True


def admit(
    gateway: ModelGateway,
    members: list[Chunk],
    query: str,
    candidate: Chunk,
    profile: CorpusProfile,
) -> tuple[str, bool]:
    """Classify a candidate chunk against the current context.

    Returns ``(verdict, flagged)``; after a failed re-prompt the
    conservative verdict is UNRELATED.
    """
    request = ChatRequest(
        template_id="chunk_addition_verification",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "seed_id": members[0].id,
            "member_ids": ", ".join(c.id for c in members),
            "content": _member_block(members),
            "query": query,
            "candidate_id": candidate.id,
            "candidate_content": candidate.content,
        },
    )
    try:
        verdict, _ = complete_with_retry_parse(gateway, request, parse_admission)
        return verdict, False
    except ProtocolError as err:
        logger.warning(
            "admission protocol failed twice for candidate %s (%s); "
            "rejecting as UNRELATED",
            candidate.id,
            err,
        )
        return ADMIT_UNRELATED, True


def build_context(
    gateway: ModelGateway,
    seed: Chunk,
    index: VectorIndex,
    chunks_by_id: dict[str, Chunk],
    profile: CorpusProfile,
    *,
    max_iterations: int = 3,
    member_budget: int = 6,
    top_n: int = 20,
    keep_k: int = 5,
    attach_images: bool = True,
    multihop: bool = True,
) -> SemanticContext:
    """Grow a semantic context around one seed chunk.

    ``iterations`` counts expansion passes — loop passes that went past
    the completeness check and evaluated candidates.  A pass that admits
    nothing ends the loop (``exhausted``), so members grew strictly at
    every iteration that continued.  A chunk is evaluated at most once
    per context: admitted members and UNRELATED rejects are never
    reconsidered.
    """
    if not multihop:
        return SemanticContext(
            seed_id=seed.id, member_ids=[seed.id], status="complete", iterations=0
        )

    members = [seed]
    member_set = {seed.id}
    rejected: set[str] = set()
    flags: list[str] = []
    trace: list[ExpansionStep] = []
    iterations = 0

    while True:
        complete, queries, flagged = assess_completeness(gateway, members, profile)
        if flagged:
            flags.append("completeness fail-safe applied")
        if complete:
            status = "complete"
            trace.append(
                ExpansionStep(queries=[], evaluations=[], admitted=[], completed=True)
            )
            break
        if iterations >= max_iterations:
            status = "budget_stop"
            trace.append(
                ExpansionStep(
                    queries=queries, evaluations=[], admitted=[], completed=False
                )
            )
            break

        evaluations: list[tuple[str, str, str]] = []
        admitted: list[str] = []
        for query in queries:
            retrieved = index.search(query, top_n)
            reranked = rerank(
                gateway,
                retrieved,
                chunks_by_id,
                attach_images=attach_images,
            )
            if reranked.fallback:
                flags.append(f"rerank fallback for query {query!r}")
            for cid in reranked.chunk_ids[:keep_k]:
                if cid in member_set or cid in rejected:
                    continue
                candidate = chunks_by_id[cid]
                verdict, verdict_flagged = admit(
                    gateway, members, query, candidate, profile
                )
                if verdict_flagged:
                    flags.append(f"admission fail-safe for candidate {cid}")
                evaluations.append((query, cid, verdict))
                if verdict == ADMIT_EXPLANATORY or (
                    verdict == ADMIT_RELATED and len(members) < member_budget
                ):
                    members.append(candidate)
                    member_set.add(cid)
                    admitted.append(cid)
                elif verdict == ADMIT_UNRELATED:
                    rejected.add(cid)

        iterations += 1
        trace.append(
            ExpansionStep(
                queries=queries,
                evaluations=evaluations,
                admitted=admitted,
                completed=False,
            )
        )
        if not admitted:
            status = "exhausted"
            break

    return SemanticContext(
        seed_id=seed.id,
        member_ids=[c.id for c in members],
        status=status,
        iterations=iterations,
        trace=trace,
        flags=flags,
    )
