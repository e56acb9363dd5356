"""Prompt templates for every model-facing step of the pipeline.

Templates are plain strings with ``{placeholder}`` slots.  Rendering is a
single pass: placeholder values are never re-scanned for further
substitution, so document content containing braces is safe.

Each template declares whether it accepts image attachments and which
sampling temperature it should run at.  Steps that parse a rigid wire
format run at temperature 0; generative steps default to 0.7.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import TemplateError

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt with its modality and sampling temperature."""

    template_id: str
    text: str
    multimodal: bool = False
    temperature: float = 0.0

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.text))

    def render(self, variables: dict[str, str]) -> str:
        """Substitute every placeholder; unbound names raise TemplateError."""
        missing = self.placeholders - set(variables)
        if missing:
            raise TemplateError(
                f"template {self.template_id!r} has unbound placeholders: "
                f"{sorted(missing)}"
            )
        return _PLACEHOLDER.sub(lambda m: str(variables[m.group(1)]), self.text)


DESCRIPTION = PromptTemplate(
    "description",
    """\
You are a technical documentation assistant. Write a dense summary of the \
attached visual (an image, chart, diagram, or table rendered as an image).

Surrounding document context:
{context}

Requirements:
- Write one single continuous paragraph of at most 250 words.
- Do not use bullet points, numbered lists, or headings.
- State what kind of visual it is and report the information it carries: \
axes, units, variables, labeled components, and the key values, trends, or \
relationships a reader would extract from it.
- Ignore purely decorative details.
""",
    multimodal=True,
    temperature=0.7,
)

SEMANTIC_CHUNKING = PromptTemplate(
    "semantic_chunking",
    """\
You segment markdown documents into coherent, self-contained chunks.

Rules:
- Skip table-of-contents, list-of-figures, and list-of-tables material.
- Fold orphan headings and very short fragments into the neighbouring text \
so each chunk can stand on its own.
- Copy content exactly as given. Never rewrite, reorder, or drop characters.
- Mark the final chunk INCOMPLETE only when the window is cut off \
mid-thought; every other chunk is COMPLETE.

Chunk types and their artifact field:
- figure: an image reference accompanied by a figure caption; artifact is \
the image path.
- standalone image: an image reference without a figure caption; artifact \
is the image path.
- table: a markdown table together with its caption and notes; artifact is \
None.
- table with images: a table whose cells reference images; artifact lists \
the image paths.
- text: anything else; artifact is None.

Emit one record per chunk, in reading order, each formatted exactly as:
<chunk_id><|#|><chunk_type><|#|><content><|#|><artifact><|#|><status><|#|><chunk_end>

chunk_id starts at 1 and increments. status is COMPLETE or INCOMPLETE.

Window:
{window}
""",
)

DOMAIN_AND_EXPERT = PromptTemplate(
    "domain_and_expert_from_topics",
    """\
A document collection was analysed into the topics below. Each topic lists \
its most representative keywords.

{topic_list}

Name the professional domain this collection belongs to, and the job title \
of the expert who works with such material daily.

Respond in exactly this format and nothing else:
<|#|>START<|#|>
<|#|>Domain: <the domain>
<|#|>Expert Role: <the expert job title>
<|#|>END<|#|>
""",
    temperature=0.7,
)

COMPLETION_VERIFICATION = PromptTemplate(
    "completion_verification",
    """\
You are a {expert_persona} working in the domain of {domain}. Decide \
whether the material below is semantically self-contained.

Treat it as INCOMPLETE when it references figures, tables, equations, or \
sections that are not present; when it uses terms, acronyms, or variables \
that are never defined; or when it leans on missing earlier context. Do not \
assume the reader can guess missing definitions. Universally known terms \
and units do not count as missing.

Anchor chunk: {seed_id}
Chunks under review: {member_ids}

{content}

If INCOMPLETE, produce one or more search queries (separated by " | ") that \
would retrieve the missing material from the same document collection.

Respond on a single line, in exactly one of these two forms:
Status: COMPLETE, Query: None, Explanation: <why it stands alone>
Status: INCOMPLETE, Query: <query 1> | <query 2>, Explanation: <what is missing>
""",
)

CHUNK_ADDITION_VERIFICATION = PromptTemplate(
    "chunk_addition_verification",
    """\
You are a {expert_persona} working in the domain of {domain}. An incomplete \
context is being expanded. Judge how the candidate chunk relates to the \
context, given the search query that retrieved it.

Anchor chunk: {seed_id}
Current context (chunks {member_ids}):
{content}

Search query: {query}

Candidate chunk {candidate_id}:
{candidate_content}

Classify the candidate:
- EXPLANATORY: it directly supplies the missing figure, table, definition, \
or referenced passage the context needs.
- RELATED: it is relevant background or complementary material but does not \
close the specific gap.
- UNRELATED: it shares no substantive meaning with the context.

Respond exactly as:
Status: <EXPLANATORY | RELATED | UNRELATED>
Explanation: <brief justification>
""",
)

MULTI_HOP_QA_GENERATION = PromptTemplate(
    "multi_hop_qa_generation",
    """\
You are a {expert_persona} working in the domain of {domain}. Using only \
the content below, write one question-answer pair that requires combining \
information from more than one chunk whenever more than one chunk is \
present.

Context chunks: {member_ids}

{content}

Work through these steps:
1. Count the chunks.
2. List the critical technical keywords of each chunk.
3. Identify the bridge keywords that connect different chunks.
4. Write one standalone question that cannot be answered from any single \
chunk alone, and a concise answer drawn strictly from the content. Name \
every subject explicitly; never write "the provided figure", "this table", \
or "the text above".
5. Map the question and the answer back to the chunks they draw on.

Respond in exactly this format:
<|#|>ANALYSIS<|#|>
Chunk Count: <integer>
Keywords per Chunk: <chunk id: keywords; ...>
Related Keywords: <bridge keywords>
<|#|>QA_GENERATION<|#|>
Question: <the question>
Answer: <the answer>
Relevance: <0-10>
Difficulty: <0-10>
<|#|>DECOMPOSITION<|#|>
Question Source: "<question fragment>" -> derived from Chunk <id>
Answer Source: "<answer fragment>" -> derived from Chunk <id>
<|#|>END<|#|>

Repeat the Question Source / Answer Source lines as needed, one line per \
fragment. Relevance scores how central the pair is to the content; \
Difficulty scores how much expertise and reasoning the question demands. \
Both are integers from 0 to 10.
""",
    multimodal=True,
    temperature=0.7,
)

QA_VERIFICATION = PromptTemplate(
    "question_answer_verification",
    """\
You are a verification agent with the expertise of a {expert_persona} in \
the domain of {domain}. The question below will be shown to users without \
the content, so it must stand entirely on its own.

Content:
{content}

Question: {question}
Answer: {answer}

Check three things independently:
1. The question names its subject explicitly rather than pointing at "this \
table", "the figure", or a bare section number, and asks something the \
content can settle.
2. The answer is factually correct according to the content.
3. The content is genuinely required: someone with general domain knowledge \
but no access to the content could not answer reliably.

Respond exactly as:
QUESTION_[CORRECT|INCORRECT]
ANSWER_[CORRECT|INCORRECT]
[REQUIRES_CONTENT|CAN_ANSWER_WITHOUT_CONTENT]
Justification: <brief reasoning>

where each bracketed group is replaced by the single token you chose, e.g. \
QUESTION_CORRECT.
""",
    multimodal=True,
)

RERANK = PromptTemplate(
    "rerank",
    """\
Rank the chunks below by how well they answer the query. Consider both the \
text and any attached images.

Query: {query}

{candidates}

List every chunk id exactly once, most relevant first, one per line, in \
exactly this format:
<Rank 1>Chunk <id>
<Rank 2>Chunk <id>
""",
    multimodal=True,
)

DEDUPLICATION_RANK = PromptTemplate(
    "deduplication_rank",
    """\
You are a dataset curator with the expertise of a {expert_persona} in the \
domain of {domain}. The question-answer pairs below are near-duplicates of \
each other. Reorder them from the strongest, most complete formulation to \
the most redundant one. Copy every pair verbatim; do not drop, merge, or \
edit anything.

Candidates:
{candidates}

Respond in exactly this format:
<|#|>START<|#|>
Question<|#|><question text><|#|>Answer<|#|><answer text>
<|#|>NEXT<|#|>
Question<|#|><question text><|#|>Answer<|#|><answer text>
<|#|>END<|#|>

with one Question/Answer record per pair and <|#|>NEXT<|#|> between \
consecutive records.
""",
)

DEDUPLICATION_MERGE = PromptTemplate(
    "deduplication_merge",
    """\
You are a dataset curator with the expertise of a {expert_persona} in the \
domain of {domain}. Merge the question-answer pairs below into the smallest \
set that preserves every unique detail: combine complementary pairs into \
one richer pair, keep the best formulation of outright duplicates, and \
drop nothing that adds information.

Candidates:
{candidates}

Respond in exactly this format:
<|#|>START<|#|>
Question<|#|><merged question><|#|>Answer<|#|><merged answer>
<|#|>NEXT<|#|>
Question<|#|><next merged question><|#|>Answer<|#|><next merged answer>
<|#|>END<|#|>

Emit as many records as remain after merging (one is common), with \
<|#|>NEXT<|#|> between consecutive records.
""",
    temperature=0.7,
)

ANSWER_QUALITY_JUDGE = PromptTemplate(
    "answer_quality_judge",
    """\
Grade one question-answer pair against the content it was generated from.

Content:
{content}

Question: {question}
Answer: {answer}

Score two axes as integers from 0 to 10:
- Faithfulness: every claim in the answer is supported by the content.
- Relevance: the pair targets substantive material of the content rather \
than trivia.

Respond exactly as:
Faithfulness: <0-10>
Relevance: <0-10>
""",
)

VISUAL_GROUNDING_JUDGE = PromptTemplate(
    "visual_grounding_judge",
    """\
Decide whether answering the question genuinely requires the attached \
image(s): the answer must depend on visual features that are actually \
present in them, not just on nearby text.

Question: {question}
Answer: {answer}

Respond with exactly one token: GROUNDED or NOT_GROUNDED.
""",
    multimodal=True,
)

TEMPLATES: dict[str, PromptTemplate] = {
    t.template_id: t
    for t in (
        DESCRIPTION,
        SEMANTIC_CHUNKING,
        DOMAIN_AND_EXPERT,
        COMPLETION_VERIFICATION,
        CHUNK_ADDITION_VERIFICATION,
        MULTI_HOP_QA_GENERATION,
        QA_VERIFICATION,
        RERANK,
        DEDUPLICATION_RANK,
        DEDUPLICATION_MERGE,
        ANSWER_QUALITY_JUDGE,
        VISUAL_GROUNDING_JUDGE,
    )
}

# Used when persona synthesis is disabled: prompts still need the slots
# filled, so they get deliberately generic stand-ins.
GENERIC_DOMAIN = "general technical subject matter"
GENERIC_PERSONA = "well-read generalist analyst"


def get_template(template_id: str) -> PromptTemplate:
    try:
        return TEMPLATES[template_id]
    except KeyError:
        raise TemplateError(f"unknown template id {template_id!r}") from None


def temperature_defaults() -> dict[str, float]:
    """Per-template sampling temperatures, for the run manifest."""
    return {tid: t.temperature for tid, t in TEMPLATES.items()}
