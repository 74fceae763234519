"""Template-deformation shape correspondence with a hypernetwork-driven decoder.

A query cloud is encoded to a global embedding; a hypernetwork turns the
embedding into the weights, scales and biases of a small decoder that moves
each template point.  Two clouds correspond through their deformations of the
shared template.
"""

from .cloudio import load_cloud, save_cloud
from .data import (
    CorrespondencePair,
    ModelBundle,
    canonical_shape,
    deform_shape,
    generate_dataset,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    write_dataset,
)
from .errors import ContractError, EmptyCloudError, FormatError, MetaDeformError, NumericError, ShapeError
from .geometry import NNIndex, PointCloud, RotationPair, chamfer, chamfer_mean, nearest, rotation_apply
from .model import (
    DESK_CONFIG,
    PAPER_CONFIG,
    LvcDeformNet,
    MetaDeformNet,
    ModelConfig,
    count_params,
    deform_template,
    encode,
    lvc_decode,
    meta_decode,
    predict_params,
)
from .pipeline import (
    InferenceConfig,
    TrainConfig,
    benchmark_decoders,
    correspond,
    deform_query,
    eval_correspondence,
    hot_swap_template,
    new_model,
    optimize_embedding,
    optimize_rotation,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
