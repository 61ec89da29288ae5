"""Two-timescale Lorenz-96 laboratory.

Simulates the coupled slow/fast Lorenz-96 system, renders trajectories into
normalized grayscale image chunks, and recovers the hidden coupling
parameters (b, c, h) with small from-scratch neural networks and a linear
baseline.
"""

__version__ = "0.1.0"

from .sim import (  # noqa: F401
    IntegratorConfig,
    ModelParams,
    SimState,
    Trajectory,
    default_init,
    mean_fast,
    rk4_step,
    simulate,
    tendencies,
)
from .dataset import (  # noqa: F401
    Chunk,
    ChunkDataset,
    NormalizationStats,
    ParameterSampler,
    TaskKind,
    build_dataset,
    chunk_image,
    load_dataset,
    render_image,
    sample_parameters,
    save_dataset,
)
