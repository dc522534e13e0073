"""Single-view point cloud completion along camera rays.

Modules: geometry (rays, shadow volume, movement budgets), spatial
(kd-tree index, FPS), metrics (chamfer, f-score, dcd, split chamfer),
autodiff (reverse-mode tape), net (dense stacks, Adam, checkpoints),
completion (offset prediction and constrained refinement), data
(synthetic shapes, scan simulation, PLY/XYZ io), trainer (three-stage
schedule), cli (gen-data / train / complete / eval).
"""

from raycomplete.completion import baseline_upsample, complete
from raycomplete.geometry import PointCloud
from raycomplete.metrics import chamfer, evaluate_pair

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "baseline_upsample",
    "chamfer",
    "complete",
    "evaluate_pair",
    "__version__",
]
