"""Model adapter: KVC1 extraction and compacted-cache injection."""

from .extract import (ExtractionSpec, export_cache, export_on_policy,
                      load_model, model_geometry, rope_params)
from .inject import (BiasUnsupportedError, build_compact_cache,
                     build_hybrid_cache, inject_and_generate)
from .toy_model import build_toy_model, random_context

__version__ = "0.1.0"
