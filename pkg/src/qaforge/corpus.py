"""Corpus ingestion: markdown loading, visual enrichment, windows, chunks.

The ingestion path for one document is:

1. locate image references and generate a textual description for each
   (unless images are disabled for the run),
2. inline every description immediately after its image reference, so the
   enriched markdown carries visual content into the text embedding space,
3. strip table-of-contents material,
4. segment the enriched markdown into atomic units (sentences for prose;
   whole blocks for tables, image lines, headings, and fenced code),
5. slide fixed-size overlapping windows over the unit sequence,
6. chunk each window (model-driven protocol by default, with an analytic
   partition-optimizer fallback, or a fixed token budget),
7. deduplicate window overlap, stitch chunks cut at window boundaries,
   and assign global chunk ids.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .chunking import fixed_partition, optimal_partition
from .errors import EmptyInput, FormatError, ProtocolError
from .gateway import ChatRequest, EmbeddingVector, ModelGateway, complete_with_retry_parse

logger = logging.getLogger(__name__)

CHUNK_KINDS = ("text", "table", "table_with_images", "figure", "standalone_image")
VISUAL_KINDS = ("table_with_images", "figure", "standalone_image")

FIELD_SEPARATOR = "<|#|>"
CHUNK_TERMINATOR = "<chunk_end>"

_KIND_ALIASES = {
    "text": "text",
    "table": "table",
    "table with images": "table_with_images",
    "table_with_images": "table_with_images",
    "figure": "figure",
    "standalone image": "standalone_image",
    "standalone_image": "standalone_image",
}

_IMAGE_REF = re.compile(r"!\[[^\]]*\]\(([^)\s]+)\)")
_IMAGE_ONLY_LINE = re.compile(r"^\s*!\[[^\]]*\]\([^)]+\)\s*$")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_TOC_HEADING = re.compile(
    r"^#+\s*(table of contents|contents|list of figures|list of tables)\s*$",
    re.IGNORECASE,
)
_BULLET_LINE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_FIGURE_CAPTION = re.compile(r"\bfig(?:ure)?\.?\s*\d+", re.IGNORECASE)

MAX_DESCRIPTION_WORDS = 250


@dataclass
class Chunk:
    """One retrievable unit of corpus content."""

    id: str
    kind: str
    content: str
    artifacts: list[str] = field(default_factory=list)
    description: str | None = None
    status: str = "complete"
    embedding: EmbeddingVector | None = None
    window_span: tuple[int, int] | None = None
    doc_id: str = ""

    def validate(self) -> None:
        if self.kind not in CHUNK_KINDS:
            raise ProtocolError(f"chunk {self.id!r} has unknown kind {self.kind!r}")
        if self.kind in VISUAL_KINDS and not self.artifacts:
            raise ProtocolError(
                f"chunk {self.id!r} is {self.kind} but lists no artifacts"
            )
        if self.kind not in VISUAL_KINDS and self.artifacts:
            raise ProtocolError(
                f"chunk {self.id!r} is {self.kind} but lists artifacts"
            )
        if self.status not in ("complete", "incomplete"):
            raise ProtocolError(f"chunk {self.id!r} has bad status {self.status!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "content": self.content,
            "artifacts": list(self.artifacts),
            "description": self.description,
            "status": self.status,
            "embedding": list(self.embedding.values) if self.embedding else None,
            "window_span": list(self.window_span) if self.window_span else None,
            "doc_id": self.doc_id,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "Chunk":
        emb = row.get("embedding")
        span = row.get("window_span")
        return cls(
            id=row["id"],
            kind=row["kind"],
            content=row["content"],
            artifacts=list(row.get("artifacts") or []),
            description=row.get("description"),
            status=row.get("status", "complete"),
            embedding=EmbeddingVector(tuple(emb)) if emb else None,
            window_span=(span[0], span[1]) if span else None,
            doc_id=row.get("doc_id", ""),
        )


@dataclass
class VisualElement:
    """An image reference found in a document."""

    doc_id: str
    path: str
    line_index: int
    context: str
    description: str | None = None


@dataclass(frozen=True)
class Window:
    """A contiguous run of atomic units presented to the chunker."""

    doc_id: str
    units: tuple[str, ...]
    length: int
    overlap: int
    offset: int


# ---------------------------------------------------------------------------
# visuals


def find_visuals(doc_id: str, markdown: str, context_lines: int = 2) -> list[VisualElement]:
    """Locate image references with a little surrounding context."""
    lines = markdown.split("\n")
    out = []
    for i, line in enumerate(lines):
        for match in _IMAGE_REF.finditer(line):
            lo = max(0, i - context_lines)
            hi = min(len(lines), i + context_lines + 1)
            out.append(
                VisualElement(
                    doc_id=doc_id,
                    path=match.group(1),
                    line_index=i,
                    context="\n".join(lines[lo:hi]),
                )
            )
    return out


def _check_description_format(text: str) -> str:
    cleaned = text.strip()
    if not cleaned:
        raise FormatError("empty visual description")
    for line in cleaned.split("\n"):
        if _BULLET_LINE.match(line):
            raise FormatError("visual description contains list markers")
    if len(cleaned.split()) > MAX_DESCRIPTION_WORDS:
        raise FormatError(
            f"visual description exceeds {MAX_DESCRIPTION_WORDS} words"
        )
    return cleaned


def describe_visual(
    gateway: ModelGateway, element: VisualElement, attach_image: bool = True
) -> tuple[str, bool]:
    """Generate a prose description for one visual.

    Returns ``(description, flagged)``.  A malformed description (list
    markers, over-long) triggers exactly one re-prompt; if the retry is
    still malformed the text is accepted as-is with ``flagged=True`` so a
    stylistic lapse never sinks the run.
    """
    request = ChatRequest(
        template_id="description",
        variables={"context": element.context},
        attachments=(element.path,) if attach_image else (),
    )
    exchange = gateway.complete(request)
    try:
        description = _check_description_format(exchange.raw_response)
        element.description = description
        return description, False
    except FormatError as err:
        logger.info("visual description rejected (%s); re-prompting once", err)
    retry = gateway.complete(request)
    try:
        description = _check_description_format(retry.raw_response)
        flagged = False
    except FormatError:
        description = retry.raw_response.strip()
        flagged = True
    element.description = description
    return description, flagged


def enrich_markdown(markdown: str, elements: list[VisualElement]) -> str:
    """Inline each visual description directly below its image reference."""
    lines = markdown.split("\n")
    by_line: dict[int, list[VisualElement]] = {}
    for el in elements:
        if el.description:
            by_line.setdefault(el.line_index, []).append(el)
    out: list[str] = []
    for i, line in enumerate(lines):
        out.append(line)
        for el in by_line.get(i, ()):
            out.append("")
            out.append(el.description or "")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# units and windows


def strip_toc(markdown: str) -> str:
    """Drop table-of-contents style front matter.

    A heading that announces a table of contents (or list of figures or
    tables) is removed together with everything up to the next heading.
    """
    out = []
    skipping = False
    for line in markdown.split("\n"):
        if line.lstrip().startswith("#"):
            skipping = bool(_TOC_HEADING.match(line.strip()))
            if skipping:
                continue
        if not skipping:
            out.append(line)
    return "\n".join(out)


def segment_units(markdown: str) -> list[str]:
    """Split enriched markdown into atomic units.

    Prose paragraphs split into sentences (at ``.``, ``!``, ``?`` followed
    by whitespace); markdown tables, image-only lines, headings, and
    fenced code blocks stay whole.
    """
    units: list[str] = []
    paragraph: list[str] = []

    def flush_paragraph() -> None:
        if not paragraph:
            return
        text = " ".join(s.strip() for s in paragraph).strip()
        paragraph.clear()
        if not text:
            return
        for sentence in _SENTENCE_SPLIT.split(text):
            sentence = sentence.strip()
            if sentence:
                units.append(sentence)

    lines = markdown.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        if not stripped:
            flush_paragraph()
            i += 1
            continue
        if stripped.startswith("#"):
            flush_paragraph()
            units.append(stripped)
            i += 1
            continue
        if _IMAGE_ONLY_LINE.match(line):
            flush_paragraph()
            units.append(stripped)
            i += 1
            continue
        if stripped.startswith("|"):
            flush_paragraph()
            block = []
            while i < len(lines) and lines[i].strip().startswith("|"):
                block.append(lines[i].strip())
                i += 1
            units.append("\n".join(block))
            continue
        if stripped.startswith("```"):
            flush_paragraph()
            block = [stripped]
            i += 1
            while i < len(lines):
                block.append(lines[i].rstrip())
                if lines[i].strip().startswith("```"):
                    i += 1
                    break
                i += 1
            units.append("\n".join(block))
            continue
        paragraph.append(line)
        i += 1
    flush_paragraph()
    return units


def window_count(n_units: int, length: int, overlap: int) -> int:
    """Number of sliding windows over ``n_units`` units."""
    if n_units <= 0:
        return 0
    if n_units <= length:
        return 1
    step = length - overlap
    return -(-(n_units - overlap) // step)  # ceil division


def slide_windows(
    doc_id: str, units: list[str], length: int, overlap: int
) -> list[Window]:
    """Cut the unit sequence into overlapping windows.

    Consecutive windows share exactly ``overlap`` units; the last window
    may be shorter.  ``overlap`` must be smaller than ``length``.
    """
    if length < 1 or overlap < 0 or overlap >= length:
        raise EmptyInput(f"bad window geometry: length={length} overlap={overlap}")
    count = window_count(len(units), length, overlap)
    step = length - overlap
    windows = []
    for w in range(count):
        start = w * step
        windows.append(
            Window(
                doc_id=doc_id,
                units=tuple(units[start : start + length]),
                length=length,
                overlap=overlap,
                offset=start,
            )
        )
    return windows


# ---------------------------------------------------------------------------
# chunk protocol


def _parse_artifacts(raw: str) -> list[str]:
    cleaned = raw.strip()
    if cleaned.lower() in ("none", ""):
        return []
    return [p.strip() for p in re.split(r"[;,]", cleaned) if p.strip()]


def parse_chunk_protocol(raw: str, doc_id: str = "") -> list[Chunk]:
    """Parse a chunker response into chunks.

    Records are ``<id><|#|><kind><|#|><content><|#|><artifact><|#|><status>``
    terminated by ``<chunk_end>``.  Any record with the wrong field count,
    an unknown kind or status, or an artifact list inconsistent with its
    kind raises :class:`ProtocolError`.  Ids are local to the response;
    callers re-assign global ids after stitching.
    """
    chunks: list[Chunk] = []
    body = raw.strip()
    if CHUNK_TERMINATOR not in body:
        raise ProtocolError("chunker response has no <chunk_end> terminator")
    records = body.split(CHUNK_TERMINATOR)
    trailing = records.pop().strip()
    if trailing:
        raise ProtocolError(f"trailing content after last record: {trailing[:40]!r}")
    for ordinal, record in enumerate(records, start=1):
        record = record.strip()
        if not record:
            raise ProtocolError("empty chunk record")
        fields = record.split(FIELD_SEPARATOR)
        if fields and fields[-1].strip() == "":
            fields = fields[:-1]  # separator directly before <chunk_end>
        if len(fields) != 5:
            raise ProtocolError(
                f"chunk record {ordinal} has {len(fields)} fields, expected 5"
            )
        raw_id, raw_kind, content, raw_artifact, raw_status = (
            f.strip() for f in fields
        )
        kind = _KIND_ALIASES.get(raw_kind.lower())
        if kind is None:
            raise ProtocolError(f"chunk record {ordinal}: unknown kind {raw_kind!r}")
        status = raw_status.upper()
        if status not in ("COMPLETE", "INCOMPLETE"):
            raise ProtocolError(
                f"chunk record {ordinal}: unknown status {raw_status!r}"
            )
        if not content.strip():
            raise ProtocolError(f"chunk record {ordinal}: empty content")
        chunk = Chunk(
            id=raw_id or str(ordinal),
            kind=kind,
            content=content.strip(),
            artifacts=_parse_artifacts(raw_artifact),
            status=status.lower(),
            doc_id=doc_id,
        )
        chunk.validate()
        chunks.append(chunk)
    if not chunks:
        raise ProtocolError("chunker response contained no records")
    return chunks


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def align_chunks_to_units(chunks: list[Chunk], window: Window) -> None:
    """Attach absolute (document-level) unit spans to protocol chunks.

    The protocol requires verbatim content, so each chunk must equal the
    concatenation of a contiguous run of window units (up to whitespace);
    anything else is a protocol violation.
    """
    pointer = 0
    for chunk in chunks:
        remaining = _normalize_ws(chunk.content)
        start = pointer
        while remaining and pointer < len(window.units):
            unit = _normalize_ws(window.units[pointer])
            if remaining == unit:
                remaining = ""
            elif remaining.startswith(unit + " "):
                remaining = remaining[len(unit) + 1 :]
            else:
                break
            pointer += 1
        if remaining or pointer == start:
            raise ProtocolError(
                f"chunk {chunk.id!r} content does not align with window units"
            )
        chunk.window_span = (window.offset + start, window.offset + pointer)
    if pointer != len(window.units):
        raise ProtocolError(
            f"chunker covered {pointer} of {len(window.units)} window units"
        )


# ---------------------------------------------------------------------------
# analytic / fixed chunkers


def classify_segment(units: list[str]) -> tuple[str, list[str]]:
    """Derive (kind, artifacts) for a run of units, mirroring the taxonomy
    the model-driven chunker uses."""
    text = "\n".join(units)
    artifacts = _IMAGE_REF.findall(text)
    has_table = any(u.lstrip().startswith("|") for u in units)
    if artifacts and has_table:
        return "table_with_images", artifacts
    if artifacts:
        if _FIGURE_CAPTION.search(text):
            return "figure", artifacts
        return "standalone_image", artifacts
    if has_table:
        return "table", []
    return "text", []


def _segment_to_chunk(window: Window, start: int, end: int) -> Chunk:
    units = list(window.units[start:end])
    kind, artifacts = classify_segment(units)
    return Chunk(
        id=f"{window.doc_id}:w{window.offset}:{start}",
        kind=kind,
        content="\n".join(units),
        artifacts=artifacts,
        status="complete",
        window_span=(window.offset + start, window.offset + end),
        doc_id=window.doc_id,
    )


def chunk_window_analytic(
    gateway: ModelGateway, window: Window, lam: float
) -> list[Chunk]:
    """Partition a window with the semantic objective; no chat calls."""
    embeddings = [v.as_array() for v in gateway.embed(list(window.units))]
    partition = optimal_partition(embeddings, lam)
    return [_segment_to_chunk(window, a, b) for a, b in partition.segments()]


def chunk_window_fixed(window: Window, size_tokens: int) -> tuple[list[Chunk], list[str]]:
    """Fixed token-budget chunking. Returns (chunks, warnings)."""
    counts = [len(u.split()) for u in window.units]
    partition, oversized = fixed_partition(counts, size_tokens)
    chunks = [_segment_to_chunk(window, a, b) for a, b in partition.segments()]
    warnings = [
        f"{chunks[i].id}: single unit exceeds the {size_tokens}-token budget"
        for i in oversized
    ]
    return chunks, warnings


def chunk_window_agentic(
    gateway: ModelGateway, window: Window, lam: float
) -> tuple[list[Chunk], bool]:
    """Model-driven chunking with one re-prompt, then analytic fallback.

    Returns ``(chunks, fell_back)``.
    """
    request = ChatRequest(
        template_id="semantic_chunking",
        variables={"window": "\n\n".join(window.units)},
    )

    def parse_and_align(raw: str) -> list[Chunk]:
        chunks = parse_chunk_protocol(raw, doc_id=window.doc_id)
        align_chunks_to_units(chunks, window)
        return chunks

    try:
        chunks, _ = complete_with_retry_parse(gateway, request, parse_and_align)
        return chunks, False
    except ProtocolError as err:
        logger.warning(
            "chunk protocol failed twice on %s window @%d (%s); "
            "falling back to analytic partitioning",
            window.doc_id,
            window.offset,
            err,
        )
        return chunk_window_analytic(gateway, window, lam), True


# ---------------------------------------------------------------------------
# stitching and assembly


def _merge_overlap(left: str, right: str) -> str:
    """Join two contents, removing the exact overlapping prefix of the
    right side (the longest suffix of ``left`` that prefixes ``right``)."""
    limit = min(len(left), len(right))
    for k in range(limit, 0, -1):
        if left[-k:] == right[:k]:
            return left + right[k:]
    return left + "\n" + right


def _merge_chunks(left: Chunk, right: Chunk) -> Chunk:
    artifacts = list(left.artifacts)
    artifacts.extend(p for p in right.artifacts if p not in artifacts)
    kind = right.kind if left.kind == "text" else left.kind
    if artifacts and kind in ("text", "table"):
        kind = "table_with_images" if kind == "table" else "figure"
    span = None
    if left.window_span and right.window_span:
        span = (left.window_span[0], right.window_span[1])
    return Chunk(
        id=left.id,
        kind=kind,
        content=_merge_overlap(left.content, right.content),
        artifacts=artifacts,
        description=left.description or right.description,
        status=right.status,
        window_span=span,
        doc_id=left.doc_id or right.doc_id,
    )


def stitch_incomplete(per_window: list[list[Chunk]]) -> tuple[list[Chunk], list[str]]:
    """Merge chunks that were cut at window boundaries.

    A window's trailing INCOMPLETE chunk is merged with the first chunk of
    the next window (overlapping prefix removed).  An INCOMPLETE chunk
    with no following window survives as-is and is reported in the
    returned warnings.
    """
    out: list[Chunk] = []
    warnings: list[str] = []
    pending: Chunk | None = None
    for w, chunks in enumerate(per_window):
        for chunk in chunks:
            if pending is not None:
                chunk = _merge_chunks(pending, chunk)
                pending = None
            out.append(chunk)
        has_more = w < len(per_window) - 1
        if out and has_more and out[-1].status == "incomplete":
            pending = out.pop()
    if pending is not None:
        out.append(pending)
    for chunk in out:
        if chunk.status == "incomplete":
            warnings.append(f"{chunk.doc_id}: chunk left incomplete after stitching")
    return out, warnings


def dedupe_window_overlap(
    per_window: list[list[Chunk]], units: list[str]
) -> list[list[Chunk]]:
    """Drop or trim chunks that re-cover units already covered by an
    earlier window, so every atomic unit survives exactly once."""
    covered = 0
    result: list[list[Chunk]] = []
    for chunks in per_window:
        kept: list[Chunk] = []
        for chunk in chunks:
            if chunk.window_span is None:
                kept.append(chunk)
                continue
            start, end = chunk.window_span
            if end <= covered:
                continue
            if start < covered:
                trimmed_units = units[covered:end]
                kind, artifacts = classify_segment(trimmed_units)
                chunk = replace(
                    chunk,
                    content="\n".join(trimmed_units),
                    kind=kind,
                    artifacts=artifacts,
                    window_span=(covered, end),
                )
            kept.append(chunk)
            covered = max(covered, end)
        result.append(kept)
    return result


# ---------------------------------------------------------------------------
# document / corpus ingestion


@dataclass
class IngestResult:
    chunks: list[Chunk]
    visuals: list[VisualElement]
    warnings: list[str]
    agentic_windows: int = 0
    analytic_windows: int = 0
    fixed_windows: int = 0


def ingest_document(
    doc_id: str,
    markdown: str,
    gateway: ModelGateway,
    *,
    chunker: str = "agentic",
    window_length: int = 64,
    window_overlap: int = 8,
    lam: float = 0.3,
    describe_images: bool = True,
    attach_images: bool = True,
) -> IngestResult:
    """Run the full ingestion path for one markdown document."""
    warnings: list[str] = []
    visuals = find_visuals(doc_id, markdown)
    if describe_images:
        for element in visuals:
            _, flagged = describe_visual(gateway, element, attach_image=attach_images)
            if flagged:
                warnings.append(
                    f"{doc_id}: description for {element.path} kept despite "
                    f"format violations"
                )
        markdown = enrich_markdown(markdown, visuals)
    cleaned = strip_toc(markdown)
    units = segment_units(cleaned)
    windows = slide_windows(doc_id, units, window_length, window_overlap)

    per_window: list[list[Chunk]] = []
    agentic = analytic = fixed = 0
    for window in windows:
        if chunker == "agentic":
            chunks, fell_back = chunk_window_agentic(gateway, window, lam)
            if fell_back:
                analytic += 1
                warnings.append(
                    f"{doc_id}: window @{window.offset} chunked analytically "
                    f"after protocol failures"
                )
            else:
                agentic += 1
        elif chunker == "analytic":
            chunks = chunk_window_analytic(gateway, window, lam)
            analytic += 1
        elif chunker.startswith("fixed"):
            _, _, size = chunker.partition(":")
            chunks, fixed_warnings = chunk_window_fixed(window, int(size or 2048))
            warnings.extend(fixed_warnings)
            fixed += 1
        else:
            raise EmptyInput(f"unknown chunker {chunker!r}")
        per_window.append(chunks)

    per_window = dedupe_window_overlap(per_window, units)
    chunks, stitch_warnings = stitch_incomplete(per_window)
    warnings.extend(stitch_warnings)

    description_by_path = {v.path: v.description for v in visuals if v.description}
    for ordinal, chunk in enumerate(chunks, start=1):
        chunk.id = f"{doc_id}-{ordinal}"
        chunk.doc_id = doc_id
        if chunk.artifacts and chunk.description is None:
            for path in chunk.artifacts:
                if path in description_by_path:
                    chunk.description = description_by_path[path]
                    break
        chunk.validate()
    return IngestResult(
        chunks=chunks,
        visuals=visuals,
        warnings=warnings,
        agentic_windows=agentic,
        analytic_windows=analytic,
        fixed_windows=fixed,
    )


def load_corpus_dir(corpus_dir: str | Path) -> list[tuple[str, str]]:
    """Read every ``*.md`` file under a directory, sorted by name.

    Returns (doc_id, markdown) pairs; image paths inside the markdown are
    rewritten to absolute paths so attachments resolve later.
    """
    root = Path(corpus_dir)
    docs = []
    for path in sorted(root.glob("*.md")):
        text = path.read_text(encoding="utf-8")

        def absolutize(match: re.Match) -> str:
            ref = match.group(1)
            if re.match(r"^[a-z]+://", ref) or Path(ref).is_absolute():
                return match.group(0)
            resolved = (root / ref).resolve()
            return match.group(0).replace(ref, str(resolved))

        text = _IMAGE_REF.sub(absolutize, text)
        docs.append((path.stem, text))
    if not docs:
        raise EmptyInput(f"no markdown documents found under {root}")
    return docs
