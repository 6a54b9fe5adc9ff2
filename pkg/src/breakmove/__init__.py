"""Windowed move classification over frozen video-encoder embeddings."""

from .dataset import EmbeddingDataset, Label, gen_synthetic, load_manifest, split_train_test
from .head import HeadConfig, HeadParams, init_head, predict
from .objective import LossConfig, grad_total_loss, total_loss
from .train import TrainConfig, fit

__version__ = "0.1.0"
