"""Layout-guided multi-subject composition by decoupled cross-attention, at toy scale."""

__version__ = "0.1.0"

from .adapter import AdapterWeights, SubjectCondition, load_conditions, subject_kv
from .attention import (AttentionConfig, AttentionTrace, BlockWeights, decoupled_block, global_sum_image_cross_attention,
                        image_cross_attention, local_image_cross_attention, masked_sum_image_cross_attention,
                        text_cross_attention)
from .errors import ContainerError, LayoutFuseError, NumericError, ShapeError, SpecError, WeightsError
from .layout import GridRect, RegionAssignment, box_to_grid, build_region_assignment, iou, masks_from_layout
from .metrics import (FlopReport, LayoutScore, attention_heatmap_dump, flop_count, layout_miou,
                      localize_subjects)
from .numerics import count_ops, finite_diff_grad, matmul, scaled_dot_attention, softmax_rows
from .tensorio import (MODES, LayoutSpec, SubjectEntry, load_container, parse_layout_spec, read_container,
                       read_image, save_container, write_container, write_image)

__all__ = [
    "AdapterWeights", "AttentionConfig", "AttentionTrace", "BlockWeights", "ContainerError", "FlopReport",
    "GridRect", "LayoutFuseError", "LayoutScore", "LayoutSpec", "MODES", "NumericError", "RegionAssignment",
    "ShapeError", "SpecError", "SubjectCondition", "SubjectEntry", "WeightsError", "attention_heatmap_dump",
    "box_to_grid", "build_region_assignment", "count_ops", "decoupled_block", "finite_diff_grad", "flop_count",
    "global_sum_image_cross_attention", "image_cross_attention", "iou", "layout_miou", "load_conditions",
    "load_container", "local_image_cross_attention", "localize_subjects", "masked_sum_image_cross_attention",
    "masks_from_layout", "matmul", "parse_layout_spec", "read_container", "read_image", "save_container",
    "scaled_dot_attention", "softmax_rows", "subject_kv", "text_cross_attention", "write_container", "write_image",
]
