from .config import RunConfig, load_config, paper_preset, toy_preset
from .manifest import Record, read_manifest, validate_manifest, write_manifest
from .stages import (build_synthetic_datasets, prepare_data, run_end_to_end, train_seg_stage,
                     train_sdm_stage)
from .toy import generate_toy_dataset, make_phantom

__all__ = ["RunConfig", "load_config", "paper_preset", "toy_preset", "Record", "read_manifest",
           "validate_manifest", "write_manifest", "build_synthetic_datasets", "prepare_data",
           "run_end_to_end", "train_seg_stage", "train_sdm_stage", "generate_toy_dataset",
           "make_phantom"]
