from .backbone import BranchTag, Encoder, build_backbone, encode
from .caim import Caim, CaimLevel, awp_tokenize, diff_features, variance_weight
from .mscnet import MSCNet, build_model, count_flops, count_params
from .ncem import Ncem, NcemLevel
from .smrm import Fmu, Mrb, Smrm

__all__ = [
    "BranchTag", "Encoder", "build_backbone", "encode", "Caim", "CaimLevel", "awp_tokenize",
    "diff_features", "variance_weight", "MSCNet", "build_model", "count_flops", "count_params",
    "Ncem", "NcemLevel", "Fmu", "Mrb", "Smrm",
]
