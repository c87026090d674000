"""Unified self-supervised pre-training on discrete image-token sequences.

Masked-token reconstruction and an echo contrastive objective share one
encoder; see the README for the pipeline and the ``demos/`` scripts for
end-to-end walkthroughs.
"""

from .generation import DecodeConfig, generate, inpaint, iterative_decode, masked_count_at
from .model import NetworkConfig, init_student, init_teacher, load_checkpoint, save_checkpoint
from .objectives import LossConfig, contrastive_loss, recon_loss, sample_echo
from .tokens import SyntheticSpec, TokenDataset, generate_synthetic, read_dataset, write_dataset
from .training import TrainConfig, Trainer, run_training

__version__ = "0.1.0"
