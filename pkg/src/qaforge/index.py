"""Exact-cosine vector index over chunks, plus model-driven reranking.

Retrieval is a brute-force scan: corpora here are small enough that exact
top-N beats any approximate structure, and determinism matters more than
speed.  Ties in similarity break toward the ascending chunk id.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Chunk
from .errors import DimensionMismatch, EmptyInput, ProtocolError
from .gateway import ChatRequest, ModelGateway, complete_with_retry_parse

logger = logging.getLogger(__name__)

_RANK_LINE = re.compile(r"<Rank\s*(\d+)\s*>\s*Chunk\s+(\S+)")


@dataclass(frozen=True)
class RankedCandidates:
    """An ordered list of (chunk_id, score) for one query."""

    query: str
    items: tuple[tuple[str, float], ...]
    stage: str = "retrieved"  # "retrieved" | "reranked"
    fallback: bool = False

    @property
    def chunk_ids(self) -> list[str]:
        return [cid for cid, _ in self.items]


@dataclass
class VectorIndex:
    """Maps chunk ids to unit-norm embedding vectors."""

    gateway: ModelGateway
    _vectors: dict[str, np.ndarray] = field(default_factory=dict)
    _dimension: int | None = None

    def __len__(self) -> int:
        return len(self._vectors)

    @property
    def dimension(self) -> int | None:
        return self._dimension

    def upsert(self, chunks: list[Chunk]) -> int:
        """Insert or replace chunk embeddings; returns the entry count.

        Chunks must already carry embeddings.  Mixing dimensions raises
        :class:`DimensionMismatch`.
        """
        for chunk in chunks:
            if chunk.embedding is None:
                raise EmptyInput(f"chunk {chunk.id!r} has no embedding")
            vec = chunk.embedding.as_array()
            if self._dimension is None:
                self._dimension = vec.shape[0]
            elif vec.shape[0] != self._dimension:
                raise DimensionMismatch(
                    f"chunk {chunk.id!r} embedding has dimension {vec.shape[0]}, "
                    f"index holds {self._dimension}"
               )
            self._vectors[chunk.id] = vec
        return len(self._vectors)

    def search(self, query: str, top_n: int) -> RankedCandidates:
        """Exact top-N cosine retrieval for a text query."""
        if not self._vectors:
            raise EmptyInput("search on an empty index")
        if top_n < 1:
            raise EmptyInput("top_n must be >= 1")
        qvec = self.gateway.embed_one(query).as_array()
        if qvec.shape[0] != self._dimension:
            raise DimensionMismatch(
                f"query embedding dimension {qvec.shape[0]} != index "
                f"dimension {self._dimension}"
            )
        scored = [
            (cid, float(np.dot(qvec, vec))) for cid, vec in self._vectors.items()
        ]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return RankedCandidates(query=query, items=tuple(scored[:top_n]))

    # -- persistence ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cid in sorted(self._vectors):
                fh.write(
                    json.dumps(
                        {"chunk_id": cid, "vector": self._vectors[cid].tolist()},
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path, gateway: ModelGateway) -> "VectorIndex":
        index = cls(gateway=gateway)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            vec = np.asarray(row["vector"], dtype=float)
            if index._dimension is None:
                index._dimension = vec.shape[0]
            elif vec.shape[0] != index._dimension:
                raise DimensionMismatch(f"snapshot mixes dimensions in {path}")
            index._vectors[row["chunk_id"]] = vec
        return index


def parse_rank_lines(raw: str, expected_ids: set[str]) -> list[str]:
    """Parse ``<Rank k>Chunk <id>`` lines into an id permutation.

    The parsed ids must be exactly the expected set with no duplicates,
    and ranks must be the contiguous sequence 1..n.
    """
    matches = _RANK_LINE.findall(raw)
    if not matches:
        raise ProtocolError("no rank lines found in rerank response")
    ranks = [int(r) for r, _ in matches]
    ids = [cid for _, cid in matches]
    if sorted(ranks) != list(range(1, len(matches) + 1)):
        raise ProtocolError(f"rank numbers {ranks} are not 1..{len(matches)}")
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate chunk ids in rerank response")
    if set(ids) != expected_ids:
        raise ProtocolError(
            f"rerank ids {sorted(ids)} do not match candidates "
            f"{sorted(expected_ids)}"
        )
    ordered = [cid for _, cid in sorted(zip(ranks, ids))]
    return ordered


def _candidate_block(chunks: list[Chunk], include_descriptions: bool) -> str:
    parts = []
    for chunk in chunks:
        body = chunk.content
        if include_descriptions and chunk.description and chunk.description not in body:
            body = f"{body}\n{chunk.description}"
        parts.append(f"<CHUNK_START id={chunk.id}>\n{body}\n<CHUNK_END>")
    return "\n".join(parts)


def rerank(
    gateway: ModelGateway,
    candidates: RankedCandidates,
    chunks_by_id: dict[str, Chunk],
    attach_images: bool = True,
) -> RankedCandidates:
    """Reorder retrieved candidates with the listwise rank protocol.

    A single candidate skips the model call.  A malformed or non-permutation
    response is re-prompted once; if still bad, retrieval order stands and
    the result is marked ``fallback``.
    """
    if len(candidates.items) <= 1:
        return RankedCandidates(
            query=candidates.query, items=candidates.items, stage="reranked"
        )
    chunks = [chunks_by_id[cid] for cid in candidates.chunk_ids]
    attachments: list[str] = []
    if attach_images:
        for chunk in chunks:
            attachments.extend(p for p in chunk.artifacts if p not in attachments)
    request = ChatRequest(
        template_id="rerank",
        variables={
            "query": candidates.query,
            "candidates": _candidate_block(chunks, include_descriptions=False),
        },
        attachments=tuple(attachments),
    )
    expected = set(candidates.chunk_ids)
    score_of = dict(candidates.items)
    try:
        ordered, _ = complete_with_retry_parse(
            gateway, request, lambda raw: parse_rank_lines(raw, expected)
        )
    except ProtocolError as err:
        logger.warning(
            "rerank failed twice for query %r (%s); keeping retrieval order",
            candidates.query,
            err,
        )
        return RankedCandidates(
            query=candidates.query,
            items=candidates.items,
            stage="reranked",
            fallback=True,
        )
    return RankedCandidates(
        query=candidates.query,
        items=tuple((cid, score_of[cid]) for cid in ordered),
        stage="reranked",
    )
