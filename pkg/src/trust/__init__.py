"""Token-driven style transfer between ultrasound devices, built on a small
numpy reverse-mode autograd engine."""

from .autograd import Tensor, backward, finite_diff_check, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, preset
from .data import DEVICE_A, DEVICE_B, Dataset, DomainSpec, generate_domain
from .downstream import DownstreamModel, train_downstream
from .errors import TrustError
from .evaluate import evaluate, translate_batch
from .model import Architecture, TrustModel, tr_align
from .objectives import FeatureExtractor, LossWeights, total_loss
from .train import train_trust

__version__ = "0.1.0"
