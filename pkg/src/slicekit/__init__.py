"""Slice selection toolkit for abdominal CT: volume I/O, tri-view 2.5D slicing,
informativeness filtering, prompt banks, toy fusion kernels and the Slice
Localization Concordance (SLC) metric."""

from .errors import SlicekitError
from .filtering import label_informative, retention_report, weighted_bce
from .metrics import confusion_metrics, evaluate, pr_auc, roc_auc
from .phantom import make_phantom, random_phantom
from .predictions import PredictionRecord, PredictionSet, read_predictions
from .prompts import build_prompts
from .report import emit_report
from .slc import SlcConfig, organ_areas, slc_score, slc_sweep, top_percent_select
from .slicer import View, augment, extract_view, fuse_views, make_triplet, standardize
from .volume_io import CtVolume, SegMap, organ_stats, percentile_normalize, read_nifti, window_hu, write_nifti

__version__ = "0.1.0"

__all__ = [
    "CtVolume", "PredictionRecord", "PredictionSet", "SegMap", "SlcConfig", "SlicekitError", "View",
    "augment", "build_prompts", "confusion_metrics", "emit_report", "evaluate", "extract_view",
    "fuse_views", "label_informative", "make_phantom", "make_triplet", "organ_areas", "organ_stats",
    "percentile_normalize", "pr_auc", "random_phantom", "read_nifti", "read_predictions",
    "retention_report", "roc_auc", "slc_score", "slc_sweep", "standardize", "top_percent_select",
    "weighted_bce", "window_hu", "write_nifti",
]
