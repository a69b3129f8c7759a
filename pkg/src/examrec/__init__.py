"""Diffusion-denoised spatiotemporal graph recommender for medical examinations."""

from examrec.ehr_graph import (
    Dataset,
    EntityVocab,
    HeteroGraph,
    PatientRecord,
    Split,
    SyntheticConfig,
    build_hetero_graph,
    generate_synthetic,
    leave_one_out_split,
    load_dataset,
    sample_negatives,
    save_dataset,
    update_sequences,
)
from examrec.errors import ConfigError, ParseError, ProtocolError, SchemaError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Dataset",
    "EntityVocab",
    "HeteroGraph",
    "ParseError",
    "PatientRecord",
    "ProtocolError",
    "SchemaError",
    "Split",
    "SyntheticConfig",
    "build_hetero_graph",
    "generate_synthetic",
    "leave_one_out_split",
    "load_dataset",
    "sample_negatives",
    "save_dataset",
    "update_sequences",
]
