"""varmae: variable-modality 3D masked-autoencoder pretraining and
segmentation heads, built on a minimal float64 autograd engine."""

from .errors import (BoundsError, ChecksumError, ConfigurationError,
                     ContractError, DimensionError, DivergenceError,
                     MalformedHeaderError, RvolError, TransferError,
                     TruncatedPayloadError, UnknownModalityError, VarmaeError)
from .tensor import (Tensor, attention, conv3d, conv_transpose3d, gelu,
                     index_select, layer_norm, linear, max_pool_axis, no_grad,
                     softmax)
from .masking import (MaskPlan, PositionTable, assemble_unmasked, mix_seed,
                      sample_mask)
from .tokenizer import (DynamicConvTokenizer, ModalityDescriptor,
                        dynamic_params, make_catalog, modulate, patchify,
                        unpatchify)
from .model import (MaskedAutoencoder, ReconstructionOutput, TransformerBlock,
                    ViTConfig, masked_l2)
from .heads import (AdaptiveUnetr, ConcatUnetr, SegmentationMask, UnetrDecoder,
                    dice_loss, modality_pool)
from .data import (GeneratorConfig, SubjectSample, build_dataset,
                   generate_subject, load_dataset, make_splits, read_rvol,
                   write_dataset, write_rvol)
from .training import (AdamW, Checkpoint, FinetuneConfig, PretrainConfig,
                       TransferReport, load_checkpoint, lr_schedule,
                       run_finetune, run_pretrain, save_checkpoint,
                       transfer_encoder)
from .stats import (PairedScores, WilcoxonResult, dice_score, evaluate_suite,
                    wilcoxon_signed_rank)

__version__ = "0.1.0"
