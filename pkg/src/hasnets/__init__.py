"""Backdoor poisoning attacks, a heal-and-select training defense, and an
entropy-based input detector, built on a small float64 numpy network stack."""

__version__ = "0.1.0"

from .attacks import (NoiseTrigger, PatchTrigger, PoisonPlan, apply_plan,
                      default_triggers, distributed_label, make_eval_poison_set,
                      stamp)
from .config import ExperimentConfig, load_config
from .data import LabeledDataset, SplitSpec, load_idx, split, synth_blobs
from .errors import (ConfigurationError, DefenseCollapseError,
                     DefenseCollapseWarning, HasNetsError, NumericError,
                     ParseError)
from .harness import run
from .metrics import auc_score, compute_accuracy, compute_asr, rad
from .nn import Model, SGD, load_model, loss_per_sample, save_model
from .rng import substream
from .strip import StripConfig, calibrate_threshold, entropy_bits, scan, strip_score
from .training import (GradShapeConfig, HasNetConfig, TrustLedger, probe_losses,
                       select, thresholds, train_gradshape, train_hasnet,
                       train_undefended, update_trust)
