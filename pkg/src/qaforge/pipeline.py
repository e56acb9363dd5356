"""End-to-end orchestration: configuration, stages, artifacts, audits.

A run walks five stages — ingest, profile, contexts, generate, curate —
and then scores the result.  Every stage persists its artifact under the
output directory (``chunks.jsonl``, ``profile.json``, ``contexts.jsonl``,
``candidates.jsonl``, ``dataset.jsonl``, ``report.json``, ``manifest.json``,
``transcript.jsonl``), keyed by a hash of the configuration so an
interrupted run resumes instead of recomputing.  With the scripted mock
backend and a fixed seed, two runs of the same configuration produce
byte-identical datasets and transcripts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus as corpus_mod
from .context import SemanticContext, build_context
from .corpus import Chunk, IngestResult
from .curator import CurationReport, curate
from .errors import AuditError, ConfigError, EmptyInput
from .gateway import (
    EmbeddingVector,
    HttpChatBackend,
    HttpEmbedder,
    MockEmbedder,
    ModelGateway,
    load_mock_script,
)
from .index import VectorIndex
from .metrics import ScoreReport, score_dataset, unit_topic
from .qa import (
    BYPASS_VERDICT,
    QACandidate,
    QAUnit,
    difficulty_filter,
    generate_candidates,
    verify,
)
from .templates import temperature_defaults
from .topics import CorpusProfile, build_profile

logger = logging.getLogger(__name__)

API_KEY_ENV = "QAFORGE_API_KEY"

STAGES = ("ingest", "profile", "contexts", "generate", "curate", "score")


@dataclass
class RunConfig:
    """Every tunable of a run.  Flat on purpose: the CLI maps each field
    to one flag and a config file maps each field to one key."""

    corpus_dir: str = ""
    out_dir: str = "out"
    mock_script: str | None = None
    prechunked: str | None = None

    # live backends (ignored when mock_script is set)
    chat_base_url: str = ""
    chat_model: str = ""
    embed_base_url: str = ""
    embed_model: str = ""

    # ingestion
    chunker: str = "agentic"  # agentic | analytic | fixed:<tokens>
    window_length: int = 64
    window_overlap: int = 8
    lam: float = 0.3

    # profiling
    projection_dims: int = 5
    cluster_eps: float = 0.4
    cluster_min_pts: int = 3
    mmr_lambda: float = 0.7
    keywords_per_topic: int = 10

    # retrieval / context building
    top_n: int = 20
    keep_k: int = 5
    max_iterations: int = 3
    member_budget: int = 6

    # generation
    num_candidates: int = 2
    difficulty_min: float = 0.3
    target_count: int | None = None

    # curation
    alpha: float = 0.7
    question_threshold: float = 0.80
    link_threshold: float = 0.75
    merge_threshold: float = 0.85

    # ablations
    no_multihop: bool = False
    no_verifier: bool = False
    no_persona: bool = False
    image_only: bool = False
    description_only: bool = False

    seed: int = 0
    embedding_dim: int = 32
    backoff_base: float = 0.1

    def validate(self) -> None:
        if self.image_only and self.description_only:
            raise ConfigError("image_only and description_only are mutually exclusive")
        if not (self.corpus_dir or self.prechunked):
            raise ConfigError("either corpus_dir or prechunked input is required")
        if self.window_overlap >= self.window_length:
            raise ConfigError("window_overlap must be smaller than window_length")
        for name in ("difficulty_min", "alpha", "question_threshold",
                     "link_threshold", "merge_threshold", "mmr_lambda"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} = {value} outside [0, 1]")
        for name in ("top_n", "keep_k", "member_budget", "num_candidates",
                     "window_length", "projection_dims", "cluster_min_pts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.chunker not in ("agentic", "analytic") and not self.chunker.startswith(
            "fixed"
        ):
            raise ConfigError(f"unknown chunker {self.chunker!r}")
        if not self.mock_script and not self.chat_base_url:
            raise ConfigError("configure either mock_script or chat_base_url")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(row) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**row)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            row = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(row, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(row)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def attach_images(self) -> bool:
        return not self.description_only

    @property
    def describe_images(self) -> bool:
        return not self.image_only


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    config: dict
    counts: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    temperatures: dict = field(default_factory=dict)
    transcript_hash: str = ""
    chunker_windows: dict = field(default_factory=dict)
    calls_by_template: dict = field(default_factory=dict)
    score: dict | None = None
    resumed_stages: list[str] = field(default_factory=list)
    completed: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
            + "\n",
            encoding="utf-8",
        )


def build_gateway(config: RunConfig) -> ModelGateway:
    if config.mock_script:
        chat = load_mock_script(config.mock_script)
        embed = MockEmbedder(seed=config.seed, dimension=config.embedding_dim)
        return ModelGateway(chat, embed, backoff_base=config.backoff_base)
    api_key = os.environ.get(API_KEY_ENV, "")
    if not api_key:
        raise ConfigError(f"set {API_KEY_ENV} to use live backends")
    chat = HttpChatBackend(config.chat_base_url, config.chat_model, api_key)
    embed = HttpEmbedder(
        config.embed_base_url or config.chat_base_url,
        config.embed_model,
        api_key,
    )
    return ModelGateway(chat, embed, backoff_base=config.backoff_base)


# ---------------------------------------------------------------------------
# stage functions


def stage_ingest(
    config: RunConfig, gateway: ModelGateway
) -> tuple[list[Chunk], list[str], dict]:
    """Load, chunk, and embed the corpus.  Returns (chunks, warnings,
    chunker window counts)."""
    warnings: list[str] = []
    windows = {"agentic": 0, "analytic": 0, "fixed": 0}
    if config.prechunked:
        chunks = read_chunks(config.prechunked)
        logger.info("loaded %d pre-chunked records", len(chunks))
    else:
        chunks = []
        for doc_id, markdown in corpus_mod.load_corpus_dir(config.corpus_dir):
            result: IngestResult = corpus_mod.ingest_document(
                doc_id,
                markdown,
                gateway,
                chunker=config.chunker,
                window_length=config.window_length,
                window_overlap=config.window_overlap,
                lam=config.lam,
                describe_images=config.describe_images,
                attach_images=config.attach_images,
            )
            chunks.extend(result.chunks)
            warnings.extend(result.warnings)
            windows["agentic"] += result.agentic_windows
            windows["analytic"] += result.analytic_windows
            windows["fixed"] += result.fixed_windows
    if not chunks:
        raise EmptyInput("ingestion produced no chunks")
    vectors = gateway.embed([c.content for c in chunks])
    for chunk, vector in zip(chunks, vectors):
        chunk.embedding = vector
    return chunks, warnings, windows


def stage_profile(config: RunConfig, gateway: ModelGateway, chunks: list[Chunk]) -> CorpusProfile:
    return build_profile(
        gateway,
        chunks,
        dimensions=config.projection_dims,
        eps=config.cluster_eps,
        min_pts=config.cluster_min_pts,
        mmr_lambda=config.mmr_lambda,
        keywords_per_topic=config.keywords_per_topic,
        no_persona=config.no_persona,
    )


def stage_contexts(
    config: RunConfig,
    gateway: ModelGateway,
    chunks: list[Chunk],
    profile: CorpusProfile,
) -> list[SemanticContext]:
    index = VectorIndex(gateway=gateway)
    index.upsert(chunks)
    chunks_by_id = {c.id: c for c in chunks}
    contexts = []
    for seed in chunks:
        contexts.append(
            build_context(
                gateway,
                seed,
                index,
                chunks_by_id,
                profile,
                max_iterations=config.max_iterations,
                member_budget=config.member_budget,
                top_n=min(config.top_n, len(chunks)),
                keep_k=config.keep_k,
                attach_images=config.attach_images,
                multihop=not config.no_multihop,
            )
        )
    return contexts


def stage_generate(
    config: RunConfig,
    gateway: ModelGateway,
    chunks: list[Chunk],
    contexts: list[SemanticContext],
    profile: CorpusProfile,
) -> tuple[list[QACandidate], list[QAUnit], list[str]]:
    """Generate, verify, and difficulty-filter QA candidates.

    Returns (all candidates with verdicts, accepted units, flags).
    """
    chunks_by_id = {c.id: c for c in chunks}
    candidates: list[QACandidate] = []
    flags: list[str] = []
    accepted: list[QAUnit] = []
    for context in contexts:
        if config.target_count is not None and len(accepted) >= config.target_count:
            flags.append(
                f"stopped at target_count={config.target_count} before seed "
                f"{context.seed_id}"
            )
            break
        new_candidates, gen_flags = generate_candidates(
            gateway,
            context,
            chunks_by_id,
            profile,
            num_candidates=config.num_candidates,
            attach_images=config.attach_images,
        )
        flags.extend(gen_flags)
        for candidate in new_candidates:
            if config.no_verifier:
                candidate.verdict = BYPASS_VERDICT
            else:
                verdict, flagged = verify(
                    gateway,
                    candidate,
                    chunks_by_id,
                    profile,
                    attach_images=config.attach_images,
                )
                candidate.verdict = verdict
                if flagged:
                    flags.append(
                        f"verification protocol failure for seed {candidate.seed_id}"
                    )
            candidates.append(candidate)
            if candidate.verdict.accepted:
                accepted.append(
                    QAUnit(
                        id=f"u-{len(accepted) + 1:04d}",
                        question=candidate.question,
                        answer=candidate.answer,
                        relevance=candidate.relevance_raw,
                        difficulty=candidate.difficulty_raw,
                        seed_chunk_id=candidate.seed_id,
                        context_chunk_ids=list(candidate.context_ids),
                        decomposition=list(candidate.decomposition),
                        verdict=candidate.verdict,
                    )
                )
    kept = difficulty_filter(accepted, config.difficulty_min)
    if len(kept) != len(accepted):
        flags.append(
            f"difficulty filter dropped {len(accepted) - len(kept)} units below "
            f"{config.difficulty_min}"
        )
    return candidates, kept, flags


def stage_curate(
    config: RunConfig,
    gateway: ModelGateway,
    units: list[QAUnit],
    profile: CorpusProfile,
) -> tuple[list[QAUnit], CurationReport]:
    final, report = curate(
        gateway,
        units,
        profile,
        alpha=config.alpha,
        question_threshold=config.question_threshold,
        link_threshold=config.link_threshold,
        merge_threshold=config.merge_threshold,
    )
    topic_of_chunk = profile.topic_of_chunk()
    for unit in final:
        unit.topic_id = unit_topic(unit, topic_of_chunk)
    return final, report


def stage_score(
    config: RunConfig,
    gateway: ModelGateway,
    units: list[QAUnit],
    chunks: list[Chunk],
    profile: CorpusProfile,
) -> ScoreReport:
    return score_dataset(
        gateway,
        units,
        {c.id: c for c in chunks},
        profile,
        judge_images=config.attach_images,
    )


# ---------------------------------------------------------------------------
# artifact io


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def write_chunks(path: str | Path, chunks: list[Chunk]) -> None:
    write_jsonl(path, [c.to_dict() for c in chunks])


def read_chunks(path: str | Path) -> list[Chunk]:
    return [Chunk.from_dict(row) for row in read_jsonl(path)]


def export_units(path: str | Path, units: list[QAUnit]) -> int:
    write_jsonl(path, [u.to_dict() for u in units])
    return len(units)


def read_units(path: str | Path) -> list[QAUnit]:
    return [QAUnit.from_dict(row) for row in read_jsonl(path)]


# ---------------------------------------------------------------------------
# audits


def audit_run(
    chunks: list[Chunk],
    contexts: list[SemanticContext],
    candidates: list[QACandidate],
    final_units: list[QAUnit],
    config: RunConfig,
) -> None:
    """Invariant checks that must hold before a run may exit 0."""
    chunk_ids = {c.id for c in chunks}
    for chunk in chunks:
        chunk.validate()
    for context in contexts:
        if context.member_ids[0] != context.seed_id:
            raise AuditError(f"context {context.seed_id} does not start at its seed")
        if len(set(context.member_ids)) != len(context.member_ids):
            raise AuditError(f"context {context.seed_id} has duplicate members")
        if not set(context.member_ids) <= chunk_ids:
            raise AuditError(f"context {context.seed_id} cites unknown chunks")
        if context.iterations > config.max_iterations:
            raise AuditError(f"context {context.seed_id} exceeded the iteration budget")
        if context.status not in ("complete", "exhausted", "budget_stop"):
            raise AuditError(f"context {context.seed_id} has status {context.status}")
    verified = sum(
        1 for c in candidates if c.verdict is not None and c.verdict.accepted
    )
    if verified > len(candidates):
        raise AuditError("funnel: verified exceeds generated")
    if len(final_units) > max(verified, 0) and candidates:
        raise AuditError("funnel: final dataset exceeds verified candidates")
    for unit in final_units:
        if unit.verdict is None or not unit.verdict.accepted:
            raise AuditError(f"unit {unit.id} lacks an accepting verdict")
        if not set(unit.context_chunk_ids) <= chunk_ids:
            raise AuditError(f"unit {unit.id} cites unknown context chunks")
        cited = {d.chunk_id for d in unit.decomposition}
        if not cited <= set(unit.context_chunk_ids):
            raise AuditError(f"unit {unit.id} decomposition leaves its context")
        if unit.hops < 1:
            raise AuditError(f"unit {unit.id} has no hops")
        if config.no_multihop and unit.hops != 1:
            raise AuditError(f"unit {unit.id} is multi-hop in a no-multihop run")


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    manifest: RunManifest
    dataset_path: Path
    units: list[QAUnit]


class _StageClock:
    def __init__(self, manifest: RunManifest, name: str) -> None:
        self.manifest = manifest
        self.name = name

    def __enter__(self) -> "_StageClock":
        self.start = time.monotonic()
        return self

    def __exit__(self, *exc: object) -> None:
        self.manifest.timings[self.name] = round(time.monotonic() - self.start, 4)


def run(config: RunConfig, *, stages: tuple[str, ...] = STAGES) -> RunResult:
    """Execute the pipeline up to and including the requested stages.

    Stage artifacts found in ``out_dir`` from a previous run with the
    same configuration hash are reused instead of recomputed.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    state_path = out_dir / "state.json"
    prior: dict = {}
    if state_path.exists():
        try:
            prior = json.loads(state_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            prior = {}
        if prior.get("config_hash") != config_hash:
            logger.info("configuration changed; ignoring previous stage outputs")
            prior = {}

    manifest = RunManifest(
        run_id=config_hash[:12],
        config_hash=config_hash,
        config=config.to_dict(),
        temperatures=temperature_defaults(),
    )
    gateway = build_gateway(config)
    done: set[str] = set(prior.get("stages", []))
    state = {"config_hash": config_hash, "stages": sorted(done)}

    def mark_done(stage: str) -> None:
        done.add(stage)
        state["stages"] = sorted(done)
        state_path.write_text(json.dumps(state, indent=2) + "\n", encoding="utf-8")

    paths = {
        "chunks": out_dir / "chunks.jsonl",
        "profile": out_dir / "profile.json",
        "contexts": out_dir / "contexts.jsonl",
        "candidates": out_dir / "candidates.jsonl",
        "dataset": out_dir / "dataset.jsonl",
        "report": out_dir / "report.json",
    }

    # ingest
    if "ingest" in done and paths["chunks"].exists():
        chunks = read_chunks(paths["chunks"])
        manifest.resumed_stages.append("ingest")
    else:
        with _StageClock(manifest, "ingest"):
            chunks, warnings, windows = stage_ingest(config, gateway)
        manifest.flags.extend(warnings)
        manifest.chunker_windows = windows
        write_chunks(paths["chunks"], chunks)
        mark_done("ingest")
    manifest.counts["chunks"] = len(chunks)

    contexts: list[SemanticContext] = []
    candidates: list[QACandidate] = []
    final_units: list[QAUnit] = []

    if "profile" in stages:
        if "profile" in done and paths["profile"].exists():
            profile = CorpusProfile.from_dict(
                json.loads(paths["profile"].read_text(encoding="utf-8"))
            )
            manifest.resumed_stages.append("profile")
        else:
            with _StageClock(manifest, "profile"):
                profile = stage_profile(config, gateway, chunks)
            paths["profile"].write_text(
                json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            mark_done("profile")
        manifest.counts["topics"] = sum(
            1 for c in profile.clusters if not c.is_outlier_bucket
        )
    else:
        profile = None  # type: ignore[assignment]

    if "contexts" in stages:
        if "contexts" in done and paths["contexts"].exists():
            contexts = [
                SemanticContext.from_dict(row)
                for row in read_jsonl(paths["contexts"])
            ]
            manifest.resumed_stages.append("contexts")
        else:
            with _StageClock(manifest, "contexts"):
                contexts = stage_contexts(config, gateway, chunks, profile)
            write_jsonl(paths["contexts"], [c.to_dict() for c in contexts])
            mark_done("contexts")
        by_status: dict[str, int] = {}
        for context in contexts:
            by_status[context.status] = by_status.get(context.status, 0) + 1
        manifest.counts["contexts"] = dict(sorted(by_status.items()))

    if "generate" in stages:
        with _StageClock(manifest, "generate"):
            candidates, units, flags = stage_generate(
                config, gateway, chunks, contexts, profile
            )
        manifest.flags.extend(flags)
        write_jsonl(paths["candidates"], [c.to_dict() for c in candidates])
        mark_done("generate")
        manifest.counts["candidates"] = len(candidates)
        manifest.counts["verified"] = sum(
            1 for c in candidates if c.verdict and c.verdict.accepted
        )
        manifest.counts["difficulty_kept"] = len(units)
    else:
        units = []

    if "curate" in stages:
        with _StageClock(manifest, "curate"):
            final_units, report = stage_curate(config, gateway, units, profile)
        manifest.flags.extend(report.flags)
        manifest.counts["merged_away"] = report.merged_away
        manifest.counts["merge_calls"] = report.merge_calls
        manifest.counts["final"] = len(final_units)
        export_units(paths["dataset"], final_units)
        mark_done("curate")

    if "score" in stages and final_units:
        with _StageClock(manifest, "score"):
            score = stage_score(config, gateway, final_units, chunks, profile)
        manifest.score = score.to_dict()
        paths["report"].write_text(
            json.dumps(score.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        mark_done("score")

    if "curate" in stages:
        audit_run(chunks, contexts, candidates, final_units, config)

    manifest.calls_by_template = dict(sorted(gateway.calls_by_template.items()))
    manifest.transcript_hash = gateway.transcript_hash()
    gateway.save_transcript(out_dir / "transcript.jsonl")
    manifest.completed = True
    manifest.save(out_dir / "manifest.json")
    return RunResult(
        manifest=manifest, dataset_path=paths["dataset"], units=final_units
    )
