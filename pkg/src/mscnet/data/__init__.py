from .dataset import BiTemporalSample, Dataset, collate, load_sample, read_manifest
from .stats import ascii_table, change_ratio_stats, proportion_below
from .synth import GenConfig, generate_dataset, plan_dataset, synthesize_sample

__all__ = [
    "BiTemporalSample", "Dataset", "collate", "load_sample", "read_manifest", "ascii_table",
    "change_ratio_stats", "proportion_below", "GenConfig", "generate_dataset", "plan_dataset",
    "synthesize_sample",
]
