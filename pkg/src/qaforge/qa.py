"""Question-answer generation, adversarial verification, and filtering.

For every semantic context the engine makes ``m`` independent generation
calls, parses each response into a candidate (analysis, QA pair, scores,
and a source decomposition mapping question/answer fragments to chunk
ids), then subjects each candidate to a three-way adversarial check:
question well-formedness, answer correctness, and genuine dependence on
the content.  Only candidates passing all three survive.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .context import SemanticContext
from .corpus import Chunk
from .errors import EmptyDecomposition, EmptyInput, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse
from .topics import CorpusProfile

logger = logging.getLogger(__name__)

_SECTION_RE = re.compile(
    r"<\|#\|>ANALYSIS<\|#\|>(?P<analysis>.*?)"
    r"<\|#\|>QA_GENERATION<\|#\|>(?P<qa>.*?)"
    r"<\|#\|>DECOMPOSITION<\|#\|>(?P<decomposition>.*?)"
    r"<\|#\|>END<\|#\|>",
    re.DOTALL,
)
_QUESTION_RE = re.compile(r"Question:\s*(.+?)(?=\n\s*Answer:|\Z)", re.DOTALL)
_ANSWER_RE = re.compile(r"Answer:\s*(.+?)(?=\n\s*Relevance:|\Z)", re.DOTALL)
_RELEVANCE_RE = re.compile(r"Relevance:\s*([0-9]+(?:\.[0-9]+)?)")
_DIFFICULTY_RE = re.compile(r"Difficulty:\s*([0-9]+(?:\.[0-9]+)?)")
_SOURCE_RE = re.compile(
    r"(Question|Answer)\s+Source:\s*\"?(.*?)\"?\s*->\s*derived from Chunk\s+(\S+?)\s*$",
    re.MULTILINE,
)
_CHUNK_COUNT_RE = re.compile(r"Chunk Count:\s*(\d+)")

_Q_VERDICT = re.compile(r"QUESTION_(CORRECT|INCORRECT)")
_A_VERDICT = re.compile(r"ANSWER_(CORRECT|INCORRECT)")
_C_VERDICT = re.compile(r"\b(REQUIRES_CONTENT|CAN_ANSWER_WITHOUT_CONTENT)\b")
_JUSTIFICATION = re.compile(r"Justification:\s*(.+)", re.DOTALL)


@dataclass(frozen=True)
class DecompositionEntry:
    """One fragment of the question or answer traced back to a chunk."""

    side: str  # "question" | "answer"
    fragment: str
    chunk_id: str

    def to_dict(self) -> dict:
        return {"side": self.side, "fragment": self.fragment, "chunk_id": self.chunk_id}


@dataclass
class Verdict:
    question_ok: bool
    answer_ok: bool
    requires_content: bool
    justification: str

    @property
    def accepted(self) -> bool:
        return self.question_ok and self.answer_ok and self.requires_content

    def to_dict(self) -> dict:
        return {
            "question_ok": self.question_ok,
            "answer_ok": self.answer_ok,
            "requires_content": self.requires_content,
            "justification": self.justification,
        }


@dataclass
class QACandidate:
    seed_id: str
    context_ids: list[str]
    question: str
    answer: str
    relevance_raw: float
    difficulty_raw: float
    decomposition: list[DecompositionEntry]
    analysis: dict
    flags: list[str] = field(default_factory=list)
    verdict: Verdict | None = None

    def to_dict(self) -> dict:
        return {
            "seed_id": self.seed_id,
            "context_ids": list(self.context_ids),
            "question": self.question,
            "answer": self.answer,
            "relevance_raw": self.relevance_raw,
            "difficulty_raw": self.difficulty_raw,
            "decomposition": [d.to_dict() for d in self.decomposition],
            "analysis": dict(self.analysis),
            "flags": list(self.flags),
            "verdict": self.verdict.to_dict() if self.verdict else None,
        }


@dataclass
class QAUnit:
    """A finished dataset row (pre- or post-curation)."""

    id: str
    question: str
    answer: str
    relevance: float
    difficulty: float
    seed_chunk_id: str
    context_chunk_ids: list[str]
    decomposition: list[DecompositionEntry]
    verdict: Verdict | None = None
    topic_id: int | None = None
    lineage: list[str] = field(default_factory=list)

    @property
    def hops(self) -> int:
        return hop_count(self)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "relevance": self.relevance,
            "difficulty": self.difficulty,
            "hops": self.hops,
            "seed_chunk_id": self.seed_chunk_id,
            "context_chunk_ids": list(self.context_chunk_ids),
            "decomposition": [d.to_dict() for d in self.decomposition],
            "topic_id": self.topic_id,
            "verdicts": self.verdict.to_dict() if self.verdict else None,
            "lineage": list(self.lineage),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "QAUnit":
        verdict = None
        if row.get("verdicts"):
            v = row["verdicts"]
            verdict = Verdict(
                question_ok=v["question_ok"],
                answer_ok=v["answer_ok"],
                requires_content=v["requires_content"],
                justification=v.get("justification", ""),
            )
        return cls(
            id=row["id"],
            question=row["question"],
            answer=row["answer"],
            relevance=float(row["relevance"]),
            difficulty=float(row["difficulty"]),
            seed_chunk_id=row["seed_chunk_id"],
            context_chunk_ids=list(row["context_chunk_ids"]),
            decomposition=[
                DecompositionEntry(d["side"], d["fragment"], d["chunk_id"])
                for d in row.get("decomposition", [])
            ],
            verdict=verdict,
            topic_id=row.get("topic_id"),
            lineage=list(row.get("lineage", [])),
        )


def hop_count(unit: QAUnit) -> int:
    """Number of distinct chunks the unit's decomposition draws on."""
    ids = {d.chunk_id for d in unit.decomposition}
    if not ids:
        raise EmptyDecomposition(f"unit {unit.id!r} has no decomposition")
    return len(ids)


def _normalize_score(raw: float) -> tuple[float, bool]:
    """Map a 0-10 protocol score to [0, 1].

    Integer scores are expected; a fractional score is rounded half-up
    and flagged rather than rejected.
    """
    flagged = raw != int(raw)
    if flagged:
        raw = int(raw + 0.5)
    raw = min(10.0, max(0.0, float(raw)))
    return raw / 10.0, flagged


def parse_generation(raw: str) -> dict:
    """Parse one generation response into its structured parts."""
    section = _SECTION_RE.search(raw)
    if not section:
        raise ProtocolError("generation response is missing protocol sections")
    qa = section.group("qa")
    question = _QUESTION_RE.search(qa)
    answer = _ANSWER_RE.search(qa)
    relevance = _RELEVANCE_RE.search(qa)
    difficulty = _DIFFICULTY_RE.search(qa)
    if not (question and answer and relevance and difficulty):
        raise ProtocolError("QA_GENERATION section is missing required fields")
    question_text = " ".join(question.group(1).split())
    answer_text = " ".join(answer.group(1).split())
    if not question_text or not answer_text:
        raise ProtocolError("empty question or answer")

    decomposition = [
        DecompositionEntry(side=side.lower(), fragment=frag.strip(), chunk_id=cid)
        for side, frag, cid in _SOURCE_RE.findall(section.group("decomposition"))
    ]
    if not decomposition:
        raise ProtocolError("DECOMPOSITION section has no source lines")

    analysis_raw = section.group("analysis")
    count = _CHUNK_COUNT_RE.search(analysis_raw)
    analysis = {
        "chunk_count": int(count.group(1)) if count else None,
        "raw": analysis_raw.strip(),
    }
    return {
        "question": question_text,
        "answer": answer_text,
        "relevance_raw": float(relevance.group(1)),
        "difficulty_raw": float(difficulty.group(1)),
        "decomposition": decomposition,
        "analysis": analysis,
    }


def parse_verdict(raw: str) -> Verdict:
    q = _Q_VERDICT.search(raw)
    a = _A_VERDICT.search(raw)
    c = _C_VERDICT.search(raw)
    if not (q and a and c):
        raise ProtocolError("verification response is missing verdict tokens")
    justification = _JUSTIFICATION.search(raw)
    return Verdict(
        question_ok=q.group(1) == "CORRECT",
        answer_ok=a.group(1) == "CORRECT",
        requires_content=c.group(1) == "REQUIRES_CONTENT",
        justification=" ".join(justification.group(1).split()) if justification else "",
    )


def context_block(members: list[Chunk]) -> str:
    return "\n\n".join(f"Chunk {c.id}:\n{c.content}" for c in members)


def _context_attachments(members: list[Chunk], attach_images: bool) -> tuple[str, ...]:
    if not attach_images:
        return ()
    paths: list[str] = []
    for chunk in members:
        paths.extend(p for p in chunk.artifacts if p not in paths)
    return tuple(paths)


def generate_candidates(
    gateway: ModelGateway,
    context: SemanticContext,
    chunks_by_id: dict[str, Chunk],
    profile: CorpusProfile,
    *,
    num_candidates: int = 2,
    attach_images: bool = True,
) -> tuple[list[QACandidate], list[str]]:
    """Run ``num_candidates`` independent generation calls for a context.

    Returns ``(candidates, flags)``.  A call whose response stays
    malformed after one re-prompt contributes no candidate; a candidate
    whose decomposition cites a chunk outside the context is dropped at
    parse time.  Both situations are reported in ``flags``.
    """
    members = [chunks_by_id[cid] for cid in context.member_ids]
    if not members:
        raise EmptyInput(f"context {context.seed_id!r} has no members")
    request = ChatRequest(
        template_id="multi_hop_qa_generation",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "member_ids": ", ".join(context.member_ids),
            "content": context_block(members),
        },
        attachments=_context_attachments(members, attach_images),
    )
    member_set = set(context.member_ids)
    candidates: list[QACandidate] = []
    flags: list[str] = []
    for call in range(num_candidates):
        try:
            parsed, _ = complete_with_retry_parse(gateway, request, parse_generation)
        except ProtocolError as err:
            flags.append(
                f"generation call {call + 1} for seed {context.seed_id} "
                f"stayed malformed: {err}"
            )
            continue
        cited = {d.chunk_id for d in parsed["decomposition"]}
        outside = cited - member_set
        if outside:
            flags.append(
                f"candidate for seed {context.seed_id} cites chunks outside "
                f"its context: {sorted(outside)}"
            )
            continue
        candidate_flags = []
        relevance, rel_flag = _normalize_score(parsed["relevance_raw"])
        difficulty, diff_flag = _normalize_score(parsed["difficulty_raw"])
        if rel_flag or diff_flag:
            candidate_flags.append("fractional protocol score rounded half-up")
        candidates.append(
            QACandidate(
                seed_id=context.seed_id,
                context_ids=list(context.member_ids),
                question=parsed["question"],
                answer=parsed["answer"],
                relevance_raw=relevance,
                difficulty_raw=difficulty,
                decomposition=parsed["decomposition"],
                analysis=parsed["analysis"],
                flags=candidate_flags,
            )
        )
    return candidates, flags


def verify(
    gateway: ModelGateway,
    candidate: QACandidate,
    chunks_by_id: dict[str, Chunk],
    profile: CorpusProfile,
    *,
    attach_images: bool = True,
) -> tuple[Verdict, bool]:
    """Adversarial verification of one candidate.

    Returns ``(verdict, flagged)``.  A verification response that stays
    malformed after one re-prompt rejects the candidate outright: an
    unverifiable pair must never reach the dataset.
    """
    members = [chunks_by_id[cid] for cid in candidate.context_ids]
    request = ChatRequest(
        template_id="question_answer_verification",
        variables={
            "expert_persona": profile.persona,
            "domain": profile.domain,
            "content": context_block(members),
            "question": candidate.question,
            "answer": candidate.answer,
        },
        attachments=_context_attachments(members, attach_images),
    )
    try:
        verdict, _ = complete_with_retry_parse(gateway, request, parse_verdict)
        return verdict, False
    except ProtocolError as err:
        logger.warning(
            "verification failed twice for seed %s (%s); rejecting candidate",
            candidate.seed_id,
            err,
        )
        return (
            Verdict(
                question_ok=False,
                answer_ok=False,
                requires_content=False,
                justification="verification protocol failure",
            ),
            True,
        )


def difficulty_filter(units: list[QAUnit], threshold: float) -> list[QAUnit]:
    """Keep units whose normalized difficulty reaches the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise EmptyInput(f"difficulty threshold {threshold} outside [0, 1]")
    return [u for u in units if u.difficulty >= threshold]


BYPASS_VERDICT = Verdict(
    question_ok=True,
    answer_ok=True,
    requires_content=True,
    justification="verification bypassed by configuration",
)
