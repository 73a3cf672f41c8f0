"""Label-efficiency experiments for a small object detector: contrastive
pretraining on unlabeled images, supervised fine-tuning on the labeled rest,
COCO-style evaluation, and rater-agreement analysis."""

__version__ = "0.1.0"

from .geometry import Box, ScoredBox, area, iou, nms  # noqa: F401
