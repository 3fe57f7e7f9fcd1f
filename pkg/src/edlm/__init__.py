"""edlm: a desk-scale lab for domain-adaptive MLM pretraining, knowledge
distillation and forum-post classification, built on its own numpy tensor
library with reverse-mode autodiff."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (LabeledPost, SynthSpec, TaskDataset, binarize, load_posts,
                   load_posts_csv, make_task_dataset, save_posts, split, synth_corpus)
from .distillation import DistillHyper, LayerMap, distill, distill_loss, init_student_from_teacher
from .evaluation import (BenchmarkResult, ConfusionMatrix, MetricsReport, PRF1, accuracy,
                         benchmark_inference, confusion_matrix, evaluate_checkpoint,
                         metrics_report, predict_labels, prf1, render_report, weighted_f1)
from .model import (EncoderParams, ModelConfig, attention, cls_logits, count_parameters,
                    forward_encoder, mlm_logits)
from .optim import AdamState, OptimizerHyper, adam_step
from .rng import SplitRng
from .tokenizer import TokenSequence, Vocab, build_vocab, decode, encode, wordpiece_split
from .training import (FinetuneHyper, MaskedBatch, PretrainHyper, finetune_classifier,
                       mask_tokens, pretrain_mlm)

__version__ = "0.1.0"
