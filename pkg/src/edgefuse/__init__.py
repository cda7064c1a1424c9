"""edgefuse: a desk-scale simulator for server-side convolutional ensembles
over weak edge-model embeddings.

Subsystems:

* ``nn``        - minimal numpy backprop engine (layers, losses, optimizers)
* ``datasets``  - loaders, synthetic blobs, decile binning, skewed partitions
* ``edge``      - weak edge models and embedding extraction
* ``vae``       - per-edge VAE imputation and trivial filling baselines
* ``ensemble``  - stacked embedding matrix and the convolutional meta-learner
* ``comms``     - transfer scenarios, schedules, byte/latency/storage ledger
* ``tiling``    - tiling-factor planner and verified tiled executor
* ``cli``       - pipeline stages as subcommands
"""

from . import comms, datasets, edge, ensemble, metrics, nn, tiling, vae
from .config import ExperimentConfig

__version__ = "0.1.0"

__all__ = [
    "comms", "datasets", "edge", "ensemble", "metrics", "nn", "tiling", "vae",
    "ExperimentConfig", "__version__",
]
