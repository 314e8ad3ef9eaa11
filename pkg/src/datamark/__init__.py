"""Backdoor-based watermarking and ownership verification for image datasets."""

from datamark.core import Dataset, Image, LabeledImage, softmax, validate_posterior
from datamark.stats import TestReport, paired_t_test, student_t_cdf, wilcoxon_signed_rank
from datamark.watermark import (
    Trigger,
    WatermarkConfig,
    WatermarkKey,
    blend,
    make_line_trigger,
    make_square_trigger,
    watermark_dataset,
    watermark_testset,
)

__all__ = [
    "Dataset",
    "Image",
    "LabeledImage",
    "TestReport",
    "Trigger",
    "WatermarkConfig",
    "WatermarkKey",
    "blend",
    "make_line_trigger",
    "make_square_trigger",
    "paired_t_test",
    "softmax",
    "student_t_cdf",
    "validate_posterior",
    "watermark_dataset",
    "watermark_testset",
    "wilcoxon_signed_rank",
]
