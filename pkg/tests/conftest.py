"""Shared helpers for the test suite."""

from __future__ import annotations

import pytest

from qaforge.corpus import Chunk
from qaforge.gateway import MockEmbedder, MockScriptBackend, ModelGateway
from qaforge.topics import CorpusProfile, TopicCluster


def make_gateway(entries, seed=0, dimension=32):
    """Scripted gateway with no real sleeping between retries."""
    return ModelGateway(
        MockScriptBackend(entries),
        MockEmbedder(seed=seed, dimension=dimension),
        backoff_base=0.0,
        sleeper=lambda _s: None,
    )


def embed_chunks(gateway, chunks):
    vectors = gateway.embed([c.content for c in chunks])
    for chunk, vec in zip(chunks, vectors):
        chunk.embedding = vec
    return chunks


def make_chunk(cid, content, kind="text", artifacts=None, doc_id="doc"):
    return Chunk(
        id=cid,
        kind=kind,
        content=content,
        artifacts=list(artifacts or []),
        doc_id=doc_id,
    )


@pytest.fixture
def profile():
    """A minimal two-topic profile; cluster members are filled per test."""
    return CorpusProfile(
        domain="industrial process engineering",
        persona="senior process engineer",
        clusters=[
            TopicCluster(id=0, member_chunk_ids=[]),
            TopicCluster(id=1, member_chunk_ids=[]),
        ],
    )
