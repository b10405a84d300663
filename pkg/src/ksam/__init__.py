"""Automatic point prompting of a promptable segmenter for lung fields in chest X-rays."""

from .clustering import KMedoids, k_means, k_medoids, subsample
from .metrics import confusion, dice, iou, kappa
from .postprocess import MorphConfig, MorphologicalCleaner, clean_mask, dilate, erode
from .prompting import PromptSelector, PromptSet, extract_regions, scale_prompts, select_prompts

__version__ = "0.1.0"

__all__ = [
    "KMedoids", "k_means", "k_medoids", "subsample",
    "confusion", "dice", "iou", "kappa",
    "MorphConfig", "MorphologicalCleaner", "clean_mask", "dilate", "erode",
    "PromptSelector", "PromptSet", "extract_regions", "scale_prompts", "select_prompts",
]
