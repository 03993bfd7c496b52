"""Tree-packed training on branching agent trajectories."""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .errors import TTKitError  # noqa: E402
from .packing import (  # noqa: E402
    NormalizationMode,
    PackedBatch,
    build_attention_mask,
    dfs_flatten,
    estimate_speedup,
    unpack_paths,
)
from .trajectory import (  # noqa: E402
    LinearCall,
    Origin,
    Role,
    TaskSpec,
    TokenEvent,
    TrajectoryTree,
    TurnSpan,
    build_tree,
    validate_tree,
)

__all__ = [
    "BACKEND",
    "LinearCall",
    "NormalizationMode",
    "Origin",
    "PackedBatch",
    "Role",
    "TTKitError",
    "TaskSpec",
    "TokenEvent",
    "TrajectoryTree",
    "TurnSpan",
    "__version__",
    "build_attention_mask",
    "build_tree",
    "dfs_flatten",
    "estimate_speedup",
    "unpack_paths",
    "validate_tree",
]
