"""Desk-scale knowledge-distillation laboratory.

Tiny from-scratch transformer language models on a minimal reverse-mode
autodiff core, the full family of distribution-matching distillation
losses, mismatch detection with teacher repair, preference alignment,
and an end-to-end experiment pipeline.
"""

from .align import AlignConfig, bt_preference, preference_loss, warmup_align
from .corpus import CorpusExample, gen_corpus, vocab_for_task
from .losses import DistillConfig, ce_loss, combined_loss, divergence, kd_loss
from .metrics import (DistHistogram, RougeScore, WarmupStats, dist_histograms,
                      exact_match, rouge_l, warmup_stats)
from .model import (LanguageModel, LmConfig, Vocab, continue_from, init_model,
                    load_checkpoint, sample, save_checkpoint, sequence_logprob,
                    token_logprobs)
from .pipeline import ExperimentConfig, RunManifest, report, run, run_seed
from .tensor import Tape, Tensor, grad_check
from .training import OptConfig, TrainReport, fit
from .warmup import (MismatchReport, PreferencePair, ProbeTrace, WarmupConfig,
                     build_pairs, detect, probe, refine, reward_accept,
                     skd_refine)

__version__ = "0.1.0"
