"""Two-stage semi-supervised segmentation: local unsupervised pre-training
of an encoder-decoder network, then supervised fine-tuning on a small
labeled regime."""

from .ops import ConvGeometry, conv2d_forward, softmax_t, tconv2d_forward, unfold
from .rules import HebbianConfig, hpca_step, plasticity, swta_step
from .layers import (
    HebbianStepReport,
    LayerWeights,
    apply_update,
    conv_hebbian_step,
    tconv_hebbian_step_s,
    tconv_hebbian_step_tsa,
)
from .network import (
    CheckpointError,
    HebbianUNet,
    NetworkSpec,
    build_network,
    forward,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .supervised import SGDConfig, backward, finetune, linear_probe, softmax_ce_loss
from .metrics import MetricsReport, asd, dice, evaluate_pair, hd95, jaccard
from .data import (
    BlobSpec,
    CovarianceSpec,
    GaussianClustersSpec,
    RegimeSpec,
    augment,
    gen_synthetic,
    load_images,
    split_regime,
)

__version__ = "0.1.0"
