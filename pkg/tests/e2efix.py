"""Deterministic end-to-end fixture for the pipeline tests.

Builds a tiny two-document corpus (an accounting note and a reactor
overview with one diagram) plus the scripted model transcript that
drives a full run to a known dataset.  Chunk contents, retrieval
permutations, and expansion verdicts are *derived* here with the same
package primitives the pipeline uses, so the script stays in lockstep
with the corpus instead of rotting when preprocessing details shift.

Three script modes exist:

- ``full``        — the whole pipeline: four contexts grow by one hop,
                    one context exhausts its candidates, one candidate
                    fails answer verification, one unit falls below the
                    difficulty floor, and one duplicated question pair
                    is merged during curation.  12 chunks in, 9 out.
- ``no_multihop`` — every context stays single-chunk; no expansion,
                    verification accepts everything, nothing merges.
- ``fixed``       — ingestion only, for the model-free fixed chunker;
                    the script holds just the image description.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qaforge.corpus import enrich_markdown, find_visuals, load_corpus_dir, segment_units, strip_toc
from qaforge.gateway import MockEmbedder
from qaforge.pipeline import RunConfig

SEED = 0
EMBED_DIM = 32
TOP_N = 5
KEEP_K = 2

# A valid 1x1 transparent PNG, enough for attachment handling.
PNG_BYTES = (
    b"\x89PNG\r\n\x1a\n\x00\x00\x00\rIHDR\x00\x00\x00\x01\x00\x00\x00\x01"
    b"\x08\x06\x00\x00\x00\x1f\x15\xc4\x89\x00\x00\x00\nIDATx\x9cc\x00\x01"
    b"\x00\x00\x05\x00\x01\r\n-\xb4\x00\x00\x00\x00IEND\xaeB`\x82"
)

LEDGER_MD = """# Ledger Guide

Quarterly revenue is posted to column four. Totals roll up monthly.

Audits reconcile the ledger against receipts. Discrepancies open a review ticket.

Depreciation entries post at period close. Asset registers feed the schedule.
"""

REACTOR_MD = """# Reactor Overview

The reactor core sits inside a steel vessel. Control rods moderate the fission rate.

Coolant enters the loop at the cold leg. The pump drives coolant through the core channels.

![coolant diagram](coolant_loop.png)

Figure 1: Coolant loop layout shows the primary circuit.

Pressure is regulated by the pressurizer. Heaters raise vapor pressure on demand.

Boron concentration trims long-term reactivity. Operators dilute boron as fuel burns.
"""

DESCRIPTION = (
    "The diagram traces the primary coolant circuit from the cold leg "
    "through the core channels and back to the pump intake."
)

# Chunk spans over each document's enriched unit list, [start, stop).
LEDGER_SPANS = [(0, 2), (2, 3), (3, 4), (4, 5), (5, 7)]
REACTOR_SPANS = [(0, 3), (3, 4), (4, 5), (5, 8), (8, 9), (9, 10), (10, 12)]
UNIT_COUNTS = {"ledger": 7, "reactor": 12}
FIGURE_CHUNK = "reactor-4"  # spans image line + description + caption

GOOD_VERDICT = (
    "QUESTION_CORRECT\nANSWER_CORRECT\nREQUIRES_CONTENT\n"
    "Justification: the pair is grounded in the cited chunks."
)
BAD_ANSWER_VERDICT = (
    "QUESTION_CORRECT\nANSWER_INCORRECT\nREQUIRES_CONTENT\n"
    "Justification: entries post at period close, not at period open."
)

DUP_QUESTION = "How does coolant travel from the cold leg through the core?"
DUP_ANSWER = (
    "Coolant enters at the cold leg and the pump drives it through the core channels."
)
MERGED_QUESTION = "How is coolant driven from the cold leg through the core channels?"
MERGED_ANSWER = (
    "It enters at the cold leg and the pump drives it through the core channels."
)
# Used instead of the duplicate for reactor-3 in no_multihop mode.
ALT_QUESTION = "What drives coolant through the core channels?"
ALT_ANSWER = "The pump drives coolant through the core channels."

# seed chunk -> (question, answer, relevance 0-10, difficulty 0-10)
QA_PLAN: dict[str, tuple[str, str, int, int]] = {
    "ledger-1": (
        "Which ledger column receives quarterly revenue postings?",
        "Column four receives the quarterly revenue postings.",
        8, 5,
    ),
    "ledger-2": (
        "How often do ledger totals roll up, and what does an audit discrepancy open?",
        "Totals roll up monthly, and a discrepancy found in audit opens a review ticket.",
        8, 6,
    ),
    "ledger-3": (
        "What do audits reconcile the ledger against?",
        "Audits reconcile the ledger against receipts.",
        7, 2,
    ),
    "ledger-4": (
        "What happens when an audit turns up a discrepancy?",
        "The discrepancy opens a review ticket.",
        8, 5,
    ),
    "ledger-5": (
        "When do depreciation entries post?",
        "Depreciation entries post at period open.",
        6, 4,
    ),
    "reactor-1": (
        "Where does the reactor core sit, and what moderates the fission rate?",
        "The core sits inside a steel vessel, and control rods moderate the fission rate.",
        9, 5,
    ),
    "reactor-2": (DUP_QUESTION, DUP_ANSWER, 9, 7),
    "reactor-3": (DUP_QUESTION, DUP_ANSWER, 8, 6),
    "reactor-4": (
        "What path does the primary coolant circuit follow in the coolant loop layout?",
        "It runs from the cold leg through the core channels and back to the pump intake.",
        9, 8,
    ),
    "reactor-5": (
        "Which component regulates pressure in the reactor loop?",
        "The pressurizer regulates loop pressure.",
        8, 5,
    ),
    "reactor-6": (
        "What raises vapor pressure on demand?",
        "Heaters raise vapor pressure on demand.",
        7, 5,
    ),
    "reactor-7": (
        "Why do operators dilute boron as fuel burns?",
        "Boron concentration trims long-term reactivity, so operators dilute it as fuel burns.",
        8, 6,
    ),
}

# seeds whose context grows by exactly one hop: seed -> (query, admitted chunk)
GROWTH: dict[str, tuple[str, str]] = {
    "ledger-2": ("review ticket workflow", "ledger-4"),
    "reactor-2": ("pump core channels path", "reactor-3"),
    "reactor-3": ("cold leg entry point", "reactor-2"),
    "reactor-4": ("pressurizer regulation", "reactor-5"),
}
EXHAUST_SEED = "reactor-7"  # expands once, every candidate judged UNRELATED
EXHAUST_QUERY = "boron dilution rationale"
REJECTED_SEED = "ledger-5"  # verification rejects the answer
FILTERED_SEED = "ledger-3"  # difficulty 2 -> 0.2, below the 0.3 floor

# (faithfulness, relevance) judge integers per final dataset row.
JUDGE_SCORES = [(8, 8), (7, 8), (8, 7), (9, 8), (8, 9), (9, 9), (8, 8), (7, 7), (8, 7)]


@dataclass
class E2EFixture:
    mode: str
    corpus_dir: Path
    script_path: Path
    chunk_order: list[str]
    contents: dict[str, str]
    members: dict[str, list[str]]
    qa_plan: dict[str, tuple[str, str, int, int]]
    final_questions: list[str]
    final_answers: list[str]
    final_hops: list[int]
    expected_counts: dict
    expected_calls: dict[str, int]
    expected_scores: dict
    entries: list[dict] = field(repr=False, default_factory=list)

    @property
    def png_path(self) -> Path:
        return self.corpus_dir / "coolant_loop.png"


def write_corpus(corpus_dir: Path) -> None:
    corpus_dir.mkdir(parents=True, exist_ok=True)
    (corpus_dir / "coolant_loop.png").write_bytes(PNG_BYTES)
    (corpus_dir / "ledger.md").write_text(LEDGER_MD, encoding="utf-8")
    (corpus_dir / "reactor.md").write_text(REACTOR_MD, encoding="utf-8")


def _derive_chunks(corpus_dir: Path) -> tuple[list[str], dict[str, str], dict[str, str]]:
    """Replay ingestion preprocessing and split each document at the
    planned spans.  Returns (chunk ids in corpus order, content by id,
    chunker protocol response by doc)."""
    docs = dict(load_corpus_dir(corpus_dir))
    order: list[str] = []
    contents: dict[str, str] = {}
    records: dict[str, str] = {}
    for doc_id, spans in (("ledger", LEDGER_SPANS), ("reactor", REACTOR_SPANS)):
        visuals = find_visuals(doc_id, docs[doc_id])
        for element in visuals:
            element.description = DESCRIPTION
        units = segment_units(strip_toc(enrich_markdown(docs[doc_id], visuals)))
        assert len(units) == UNIT_COUNTS[doc_id], (doc_id, len(units), units)
        assert spans[-1][1] == len(units)
        lines = []
        for n, (i, j) in enumerate(spans, start=1):
            cid = f"{doc_id}-{n}"
            content = " ".join(" ".join(u.split()) for u in units[i:j])
            if cid == FIGURE_CHUNK:
                kind, artifact = "figure", visuals[0].path
            else:
                kind, artifact = "text", "None"
            lines.append(
                f"{n}<|#|>{kind}<|#|>{content}<|#|>{artifact}<|#|>COMPLETE<|#|><chunk_end>"
            )
            order.append(cid)
            contents[cid] = content
        records[doc_id] = "\n".join(lines)
    return order, contents, records


def _retriever(order: list[str], contents: dict[str, str]):
    """Mirror of index search: cosine over the mock embedder, ties by id."""
    embedder = MockEmbedder(seed=SEED, dimension=EMBED_DIM)
    vectors = dict(zip(order, embedder.embed([contents[c] for c in order])))

    def retrieve(query: str) -> list[str]:
        qv = embedder.embed([query])[0]
        ranked = sorted(order, key=lambda cid: (-float(qv @ vectors[cid]), cid))
        return ranked[:TOP_N]

    return retrieve


def _generation_response(members, question, answer, relevance, difficulty) -> str:
    q_frag = " ".join(question.split()[:4])
    a_frag = " ".join(answer.split()[:4])
    return "\n".join(
        [
            "<|#|>ANALYSIS<|#|>",
            f"Chunk Count: {len(members)}",
            "Keywords per Chunk: " + "; ".join(f"{cid}: key terms" for cid in members),
            "Related Keywords: shared subject terms",
            "<|#|>QA_GENERATION<|#|>",
            f"Question: {question}",
            f"Answer: {answer}",
            f"Relevance: {relevance}",
            f"Difficulty: {difficulty}",
            "<|#|>DECOMPOSITION<|#|>",
            f'Question Source: "{q_frag}" -> derived from Chunk {members[0]}',
            f'Answer Source: "{a_frag}" -> derived from Chunk {members[-1]}',
            "<|#|>END<|#|>",
        ]
    )


def _pair_record(question: str, answer: str) -> str:
    return f"Question<|#|>{question}<|#|>Answer<|#|>{answer}"


def build_fixture(root: Path, mode: str = "full") -> E2EFixture:
    if mode not in ("full", "no_multihop", "fixed"):
        raise ValueError(f"unknown fixture mode {mode!r}")
    corpus_dir = root / "corpus"
    write_corpus(corpus_dir)
    order, contents, records = _derive_chunks(corpus_dir)
    retrieve = _retriever(order, contents)

    entries: list[dict] = []

    def add(template_id: str, match: str, response: str) -> None:
        entries.append(
            {"template_id": template_id, "match": match, "response": response}
        )

    add("description", "", DESCRIPTION)
    if mode != "fixed":
        add("semantic_chunking", "Totals roll up monthly.", records["ledger"])
        add(
            "semantic_chunking",
            "Control rods moderate the fission rate.",
            records["reactor"],
        )
        add(
            "domain_and_expert_from_topics",
            "",
            "<|#|>START<|#|>\n<|#|>Domain: Plant operations records\n"
            "<|#|>Expert Role: Reactor operations engineer\n<|#|>END<|#|>",
        )

    members = {seed: [seed] for seed in order}
    if mode == "full":
        for seed, (query, target) in GROWTH.items():
            members[seed] = [seed, target]
        for seed in order:
            anchor = f"Anchor chunk: {seed}\n"
            if seed in GROWTH:
                query, target = GROWTH[seed]
                top = retrieve(query)
                assert target in top, (seed, query, top)
                perm = [target] + [c for c in top if c != target]
                add(
                    "completion_verification",
                    anchor,
                    f"Status: INCOMPLETE, Query: {query}, "
                    "Explanation: a dependent detail lives in a sibling passage.",
                )
                add(
                    "rerank",
                    f"Query: {query}\n",
                    "\n".join(
                        f"<Rank {k}>Chunk {cid}" for k, cid in enumerate(perm, 1)
                    ),
                )
                evaluated = [c for c in perm[:KEEP_K] if c != seed]
                assert target in evaluated
                for cid in evaluated:
                    verdict = "EXPLANATORY" if cid == target else "UNRELATED"
                    add(
                        "chunk_addition_verification",
                        f"{anchor} && Candidate chunk {cid}:",
                        f"Status: {verdict}\nExplanation: judged against the gap.",
                    )
                add(
                    "completion_verification",
                    anchor,
                    "Status: COMPLETE, Query: None, "
                    "Explanation: the added chunk closes the gap.",
                )
            elif seed == EXHAUST_SEED:
                top = retrieve(EXHAUST_QUERY)
                add(
                    "completion_verification",
                    anchor,
                    f"Status: INCOMPLETE, Query: {EXHAUST_QUERY}, "
                    "Explanation: the motivation for dilution is elsewhere.",
                )
                add(
                    "rerank",
                    f"Query: {EXHAUST_QUERY}\n",
                    "\n".join(
                        f"<Rank {k}>Chunk {cid}" for k, cid in enumerate(top, 1)
                    ),
                )
                evaluated = [c for c in top[:KEEP_K] if c != seed]
                assert evaluated, (seed, top)
                for cid in evaluated:
                    add(
                        "chunk_addition_verification",
                        f"{anchor} && Candidate chunk {cid}:",
                        "Status: UNRELATED\nExplanation: different subject.",
                    )
            else:
                add(
                    "completion_verification",
                    anchor,
                    "Status: COMPLETE, Query: None, "
                    "Explanation: the passage stands alone.",
                )

    qa_plan = dict(QA_PLAN)
    if mode == "no_multihop":
        qa_plan["reactor-3"] = (ALT_QUESTION, ALT_ANSWER, 8, 6)
        q, a, rel, _ = qa_plan[FILTERED_SEED]
        qa_plan[FILTERED_SEED] = (q, a, rel, 5)  # keep it above the floor

    if mode != "fixed":
        for seed in order:
            mem = members[seed]
            question, answer, relevance, difficulty = qa_plan[seed]
            add(
                "multi_hop_qa_generation",
                f"Context chunks: {', '.join(mem)}\n",
                _generation_response(mem, question, answer, relevance, difficulty),
            )
            verdict = (
                BAD_ANSWER_VERDICT
                if (mode == "full" and seed == REJECTED_SEED)
                else GOOD_VERDICT
            )
            add("question_answer_verification", f"Question: {question}\n", verdict)

    if mode == "full":
        dup_pair = _pair_record(DUP_QUESTION, DUP_ANSWER)
        add(
            "deduplication_rank",
            DUP_QUESTION,
            f"<|#|>START<|#|>\n{dup_pair}\n<|#|>NEXT<|#|>\n{dup_pair}\n<|#|>END<|#|>",
        )
        add(
            "deduplication_merge",
            DUP_QUESTION,
            "<|#|>START<|#|>\n"
            + _pair_record(MERGED_QUESTION, MERGED_ANSWER)
            + "\n<|#|>END<|#|>",
        )

    # Final dataset rows in order, with per-row judge entries.
    final_questions: list[str] = []
    final_answers: list[str] = []
    final_hops: list[int] = []
    if mode == "full":
        for seed in order:
            if seed in (REJECTED_SEED, FILTERED_SEED, "reactor-3"):
                continue  # rejected, filtered, merged away
            if seed == "reactor-2":
                final_questions.append(MERGED_QUESTION)
                final_answers.append(MERGED_ANSWER)
                final_hops.append(2)
            else:
                question, answer, _, _ = qa_plan[seed]
                final_questions.append(question)
                final_answers.append(answer)
                final_hops.append(len(members[seed]))
        judge_scores = list(JUDGE_SCORES)
    elif mode == "no_multihop":
        for seed in order:
            question, answer, _, _ = qa_plan[seed]
            final_questions.append(question)
            final_answers.append(answer)
            final_hops.append(1)
        judge_scores = [(8, 8)] * len(order)
    else:
        judge_scores = []

    figure_question = qa_plan[FIGURE_CHUNK][0] if mode != "fixed" else ""
    for question, (f_score, r_score) in zip(final_questions, judge_scores):
        add(
            "answer_quality_judge",
            f"Question: {question}\n",
            f"Faithfulness: {f_score}\nRelevance: {r_score}",
        )
    if mode != "fixed":
        add("visual_grounding_judge", f"Question: {figure_question}\n", "GROUNDED")

    script_path = root / f"script-{mode}.jsonl"
    script_path.write_text(
        "".join(json.dumps(e, ensure_ascii=False) + "\n" for e in entries),
        encoding="utf-8",
    )

    if mode == "full":
        expected_counts = {
            "chunks": 12,
            "topics": 1,
            "contexts": {"complete": 11, "exhausted": 1},
            "candidates": 12,
            "verified": 11,
            "difficulty_kept": 10,
            "merge_calls": 1,
            "merged_away": 1,
            "final": 9,
        }
    elif mode == "no_multihop":
        expected_counts = {
            "chunks": 12,
            "topics": 1,
            "contexts": {"complete": 12},
            "candidates": 12,
            "verified": 12,
            "difficulty_kept": 12,
            "merge_calls": 0,
            "merged_away": 0,
            "final": 12,
        }
    else:
        expected_counts = {"chunks": 12}

    if judge_scores:
        n = len(judge_scores)
        expected_scores = {
            "faithfulness": sum(f for f, _ in judge_scores) / (10.0 * n),
            "relevance": sum(r for _, r in judge_scores) / (10.0 * n),
            "avg_hops": sum(final_hops) / float(n),
            "domain_jsd": 0.0,
            "visual_grounding_rate": 1.0,
            "multimodal_units": 1,
        }
    else:
        expected_scores = {}

    return E2EFixture(
        mode=mode,
        corpus_dir=corpus_dir,
        script_path=script_path,
        chunk_order=order,
        contents=contents,
        members=members,
        qa_plan=qa_plan,
        final_questions=final_questions,
        final_answers=final_answers,
        final_hops=final_hops,
        expected_counts=expected_counts,
        expected_calls=dict(Counter(e["template_id"] for e in entries)),
        expected_scores=expected_scores,
        entries=entries,
    )


def make_config(fixture: E2EFixture, out_dir: Path, **overrides) -> RunConfig:
    config = RunConfig(
        corpus_dir=str(fixture.corpus_dir),
        out_dir=str(out_dir),
        mock_script=str(fixture.script_path),
        chunker="agentic",
        window_length=64,
        window_overlap=8,
        projection_dims=3,
        # Unit-norm embeddings keep every pairwise distance at or below 2,
        # so this eps yields exactly one topic no matter where the corpus
        # lives on disk (the figure chunk embeds its absolute image path).
        cluster_eps=2.0,
        cluster_min_pts=2,
        top_n=TOP_N,
        keep_k=KEEP_K,
        max_iterations=3,
        member_budget=6,
        num_candidates=1,
        difficulty_min=0.3,
        seed=SEED,
        embedding_dim=EMBED_DIM,
        backoff_base=0.0,
    )
    if fixture.mode == "no_multihop":
        config.no_multihop = True
    if fixture.mode == "fixed":
        config.chunker = "fixed:24"
    for key, value in overrides.items():
        setattr(config, key, value)
    return config
