# %% [markdown]
# # Segmentation metrics by hand
#
# Accuracy, mIoU and average precision on masks small enough to check in
# your head.

# %%
from fractions import Fraction

import numpy as np

from ca_kit.segeval import (
    SegmentationSample,
    average_precision,
    binarize_mean_threshold,
    evaluate_single_object,
    miou,
    pixel_accuracy,
)

gt = np.array([[1, 0], [0, 0]])
pred = np.array([[1, 1], [0, 0]])
print("accuracy:", pixel_accuracy(pred, gt))

# %% [markdown]
# Class 1: intersection 1, union 2, IoU 1/2. Class 0: intersection 2,
# union 3, IoU 2/3. The mean is 7/12, and the implementation returns the
# closest double to it.

# %%
value = miou(pred, gt, [0, 1])
print(value, value == 7 / 12, Fraction(value).limit_denominator(100))

# %% [markdown]
# Label 255 marks pixels to ignore. They drop out of every count.

# %%
gt_ignore = np.array([[1, 255], [0, 0]])
print("accuracy:", pixel_accuracy(pred, gt_ignore), "mIoU:", miou(pred, gt_ignore, [0, 1]))

# %% [markdown]
# Average precision ranks pixels by score and averages precision at each
# positive. Ties keep pixel order, so the second ranking below loses a bit.

# %%
print(average_precision([0.9, 0.8, 0.1], [1, 1, 0]))
print(average_precision([0.5, 0.5, 0.5], [0, 1, 1]))

# %% [markdown]
# The single-object protocol binarizes the target's map at its mean.
# Equality with the mean counts as background.

# %%
plane = np.array([[3.0, 1.0], [1.0, 3.0]])
print(binarize_mean_threshold(plane))
sample = SegmentationSample("toy", np.stack([plane, 4 - plane], axis=2), ("cat", "sky"),
                            np.array([[1, 0], [0, 1]]), target="cat")
print(evaluate_single_object([sample], ["sky"]).summary())
