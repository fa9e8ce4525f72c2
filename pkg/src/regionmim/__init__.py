"""Region-guided masked image modeling for organ-masked grayscale images.

A small, fully verifiable stack: a reverse-mode tape engine over float64
numpy arrays, organ-mask-guided patch masking, a ViT encoder/decoder trained
with a masked-patch reconstruction loss, and a fine-tuning classifier, plus
dataset plumbing (PGM files, manifests, a synthetic corpus) and checkpoints.
"""

from .autodiff import (Tensor, backward, cross_entropy, finite_diff_gradient,
                       gelu, layer_norm, matmul, max_relative_error, no_grad,
                       softmax, zero_grads)
from .checkpoint import (Checkpoint, collect_arrays, load_checkpoint,
                         model_config, params_from_checkpoint,
                         restore_parameters, save_checkpoint)
from .data import (ClassTexture, DatasetManifest, SampleRecord, SyntheticSpec,
                   generate_synthetic, load_manifest, load_sample, load_split,
                   read_pgm, write_pgm)
from .errors import (CapacityError, CheckpointError, ConfigError,
                     ContractError, DataError, GeometryError, LabelError,
                     RegionMimError, ShapeError, StratificationError,
                     StrategyError, TrainingError)
from .gradcheck import composed_gradient_errors
from .model import (ClassifierHead, DecoderConfig, DecoderParams,
                    EncoderConfig, EncoderParams, classifier_forward,
                    cross_entropy_loss, decoder_forward, embed_unmasked,
                    encoder_forward, init_parameters, pretrain_loss,
                    reconstruction_loss)
from .patching import (ImageGrid, MaskImage, MaskingPlan, PatchGrid, RANDOM,
                       REGION, STRATEGIES, build_masking_plan,
                       compute_valid_set, reassemble_image, split_into_patches)
from .training import (AdamW, EpochMetrics, MetricsRecord, RunConfig,
                       adamw_step, epoch_lr, evaluate, finetune, pretrain,
                       stratified_subset, sweep_masking_ratio,
                       write_metrics_csv, write_sweep_csv)

__version__ = "0.1.0"
