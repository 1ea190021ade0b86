"""Dataset ingestion pipeline producing hmir retrieval containers.

Segments images into multi-granularity patch pyramids, embeds patches and
captions, and writes the on-disk index plus query files that the retrieval
engine consumes.
"""

from .container import write_container, write_query_file
from .embedding import Embedder, HashEmbedder
from .export import (DEFAULT_LEVELS, DatasetImage, ExportReport,
                     embed_and_export, load_dataset_manifest,
                     load_decompositions, load_image, split_caption)
from .segmentation import (PipelineError, SegmentPatch, build_patches,
                           exact_count, segment_image, segment_masks)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LEVELS",
    "DatasetImage",
    "Embedder",
    "ExportReport",
    "HashEmbedder",
    "PipelineError",
    "SegmentPatch",
    "build_patches",
    "embed_and_export",
    "exact_count",
    "load_dataset_manifest",
    "load_decompositions",
    "load_image",
    "segment_image",
    "segment_masks",
    "split_caption",
    "write_container",
    "write_query_file",
    "__version__",
]
