"""
Crop-and-merge on a tiny grid
=============================

Each subject only attends from the pixels it owns.  Overlaps are settled by
priority before any attention runs, so no pixel ever mixes two subjects.
"""

import numpy as np

from layoutfuse import AdapterWeights, SubjectCondition, build_region_assignment, masks_from_layout
from layoutfuse.attention import BlockWeights, local_image_cross_attention, masked_sum_image_cross_attention

rng = np.random.default_rng(0)
H = W = 8
heads, d_head, d_cond = 2, 4, 4
d_model = heads * d_head

# Two overlapping boxes; the second one has the higher priority.
subjects = [
    SubjectCondition("dog", rng.standard_normal((2, d_cond)), (0.0, 0.0, 0.625, 0.625), priority=0),
    SubjectCondition("cat", rng.standard_normal((3, d_cond)), (0.375, 0.375, 1.0, 1.0), priority=1),
]

# The winner map: -1 means no subject, otherwise the owning subject index.
assignment = build_region_assignment(subjects, H, W)
print(assignment.winner)

# Random projections stand in for a trained block.
block = BlockWeights(rng.standard_normal((1, heads, d_model, d_head)) / np.sqrt(d_model),
                     rng.standard_normal((1, heads, d_cond, d_head)),
                     rng.standard_normal((1, heads, d_cond, d_head)),
                     np.eye(d_model)[None])
adapter = AdapterWeights(rng.standard_normal((1, heads, d_cond, d_head)),
                         rng.standard_normal((1, heads, d_cond, d_head)))
Z = rng.standard_normal((H * W, d_model))

anyms = local_image_cross_attention(Z, subjects, assignment, 0, block, adapter)
masked = masked_sum_image_cross_attention(Z, subjects, masks_from_layout(subjects, H, W), 0, block, adapter)

# Pixels covered by exactly one box agree.  Uncovered pixels keep Q under
# crop-and-merge and get 0 under masked-sum.  The overlap is where the two
# really part ways: masked-sum adds both subjects there.
diff = np.abs(anyms - masked).max(axis=1).reshape(H, W)
print(np.round(diff, 2))
overlap = np.sum(masks_from_layout(subjects, H, W), axis=0) > 1
print("max difference outside the overlap:", diff[~overlap & (assignment.winner >= 0)].max())
print("max difference inside the overlap:", diff[overlap].max())
