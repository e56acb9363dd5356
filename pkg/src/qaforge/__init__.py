"""qaforge: turn a markdown + image corpus into a verified multi-hop
QA evaluation set.

The pipeline ingests documents into semantically coherent chunks,
profiles the corpus into topics with a domain and expert persona,
grows a multi-chunk context around each seed chunk, generates and
adversarially verifies question-answer pairs, and deduplicates the
survivors into a final dataset.  Every model interaction goes through
:class:`qaforge.gateway.ModelGateway`, which can replay a scripted
response file instead of calling a live model, so the whole pipeline
is reproducible and testable offline.
"""

from .errors import PipelineError
from .gateway import MockEmbedder, ModelGateway, load_mock_script
from .pipeline import RunConfig, RunManifest, run

__version__ = "0.1.0"

__all__ = [
    "PipelineError",
    "ModelGateway",
    "MockEmbedder",
    "load_mock_script",
    "RunConfig",
    "RunManifest",
    "run",
    "__version__",
]
