"""afftrack: self-supervised temporal correspondence at desk scale.

A single column-stochastic inter-frame affinity matrix drives three things:
region-level localization (tracking a patch's center and scale in the next
frame), fine-grained matching (reconstructing color features across frames),
and recurrent label propagation at inference (masks, keypoints, textures).
Training is self-supervised on synthetic sprite videos with concentration
and cycle-consistency regularizers.
"""

from .autodiff import GradTape, Tensor, finite_difference_check
from .affinity import (
    AffinityMatrix,
    FeatureMap,
    LocationMap,
    canonical_grid,
    compute_affinity,
    gram_energy,
    topk_sparsify,
    trace_locations,
    transport,
)
from .localization import (
    BBox,
    bilinear_sample,
    estimate_scale,
    locate_center,
    localize_patch,
    mean_shift_refine,
    roi_crop,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    concentration_local,
    concentration_truncated,
    orthogonal_cycle_feature,
    orthogonal_cycle_location,
    reconstruction_loss,
    total_loss,
)
from .models import (
    ColorAutoencoder,
    ConvEncoder,
    encode_color,
    encode_gray,
    load_checkpoint,
    pretrain_color_autoencoder,
    save_checkpoint,
)
from .training import Adam, PairSample, TrainConfig, run_training, sample_pair, train_step
from .propagation import (
    LabelMap,
    PropagationConfig,
    heatmap_to_joint,
    metric_boundary_f,
    metric_jaccard,
    metric_pck,
    propagate_step,
    propagate_video,
)
from .sprites import SceneSpec, SpriteScene, generate_scene, make_corpus, oracle_features
from .colorspace import lab_to_rgb, rgb_to_gray, rgb_to_lab

__version__ = "0.1.0"
