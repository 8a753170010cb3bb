from .metrics import Detection, assign_and_nms, coco_map, iou, nms, score_regions
from .protocol import COLUMNS, EvalReport, run_protocol
from .world import GenConfig, SyntheticWorld, WorldConfig, build_world, gen_benchmark

__all__ = [
    "COLUMNS",
    "Detection",
    "EvalReport",
    "GenConfig",
    "SyntheticWorld",
    "WorldConfig",
    "assign_and_nms",
    "build_world",
    "coco_map",
    "gen_benchmark",
    "iou",
    "nms",
    "run_protocol",
    "score_regions",
]
