"""Score-space sharpness-aware adversarial pruning at desk scale."""
from .attacks import AttackConfig, pgd_attack, robust_accuracy
from .autodiff import Graph, Tensor
from .config import RunConfig, load_config, parse_config
from .data import Dataset, gen_two_moons, load_idx, write_idx
from .diagnostics import MaskTrace, hamming, hamming_trace, hvp, lambda_max, loss_diff_sharpness
from .finetune import FinetuneConfig, PretrainConfig, pretrain, s2ap_finetune, standard_finetune
from .losses import LossKind, robust_loss
from .model import Network, PrunableLayer, topk_mask
from .pruner import PruneConfig, awp_prune, baseline_prune, perturb_scores, s2ap_prune
from .report import emit_report
from .runner import ExperimentResult, run_paired, run_pipeline, sweep_gamma

__version__ = "0.1.0"
