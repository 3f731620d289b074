"""Indoor place recognition from semantically encoded RGB point clouds.

The pipeline: keyframe clouds pass through a kernel-point-convolution
encoder whose features, supervised once by a segmentation stage, are
aggregated across resolution levels into a unit-norm global descriptor;
place recognition is nearest-neighbour retrieval over those descriptors.

Typical entry points:

    from placerec import ModelConfig, PlaceRecognitionModel
    from placerec.training import train_stage1, train_stage2
    from placerec.retrieval import build_database, evaluate

or the ``placerec`` command for batch runs.
"""

__version__ = "0.1.0"

from .geometry import (CameraPose, RgbPointCloud, frustum_crop,    # noqa: F401
                       grid_subsample, radius_neighbors)
from .pipeline import (ModelConfig, PlaceDescriptor,               # noqa: F401
                       PlaceRecognitionModel)
from .errors import PlacerecError                                   # noqa: F401

__all__ = [
    "CameraPose",
    "ModelConfig",
    "PlaceDescriptor",
    "PlaceRecognitionModel",
    "PlacerecError",
    "RgbPointCloud",
    "__version__",
    "frustum_crop",
    "grid_subsample",
    "radius_neighbors",
]
