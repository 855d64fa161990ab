"""Sample storage, the configuration tree and the fitted seed distributions."""

from .fit import SeedDistribution, fit, footprint_kappa, great_circle_nearest, sample_weights
from .model import GuideModel
from .records import (RECORD_DTYPE, RecordBuffer, SubPathSample, decode_code, encode_code,
                      oct_decode, oct_encode, pack_rows, record, to_samples)
from .stree import GuidingTree, SplitInfo, rebuild
from .vmf import VMFMixture, mean_resultant_length, sample_vmf, vmf_log_pdf, vmf_pdf

__all__ = [
    "GuideModel", "GuidingTree", "RECORD_DTYPE", "RecordBuffer", "SeedDistribution", "SplitInfo",
    "SubPathSample", "VMFMixture", "decode_code", "encode_code", "fit", "footprint_kappa",
    "great_circle_nearest", "mean_resultant_length", "oct_decode", "oct_encode", "pack_rows",
    "rebuild", "record", "sample_vmf", "sample_weights", "to_samples", "vmf_log_pdf", "vmf_pdf",
]
