# util/sample.py

from dataclasses import dataclass, field

import numpy as np

from util.errors import ShapeError, ValidationError


def validate_mask(mask: np.ndarray, num_classes: int | None = None, ignore_label: int | None = None) -> np.ndarray:
    """A LabelMask is a 2-D integer array; labels lie in [0, num_classes) or equal ignore_label."""
    if mask.ndim != 2:
        raise ShapeError(f"label mask must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValidationError(f"label mask must hold integers, got {mask.dtype}")
    if num_classes is not None:
        valid = mask != ignore_label if ignore_label is not None else np.ones(mask.shape, dtype=bool)
        labels = mask[valid]
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError(
                f"labels must lie in [0, {num_classes}) or equal {ignore_label}, "
                f"found range [{labels.min()}, {labels.max()}]"
            )
    return mask


@dataclass
class Sample:
    """An image (3, H, W) in [0, 1] paired with its (H, W) label mask."""
    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must have shape (3, H, W), got {self.image.shape}")
        validate_mask(self.mask)
        if self.image.shape[1:] != self.mask.shape:
            raise ShapeError(f"image {self.image.shape[1:]} and mask {self.mask.shape} differ spatially")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape
