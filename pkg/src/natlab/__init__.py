"""Desk-scale laboratory for scaling behaviors of non-autoregressive translation.

Train tiny autoregressive teachers and NAT students (mask-predict and
glancing training) on synthetic multimodal translation tasks, distill,
decode, and measure quality / weakness / throughput across symmetric and
asymmetric architecture scales.
"""

from .autodiff import (
    Tensor,
    ParameterSet,
    backward,
    forward_primitives,
    gradient_check,
    no_grad,
)
from .data import (
    ParallelCorpus,
    SyntheticTaskSpec,
    Vocab,
    build_vocab,
    count_modes,
    encode_batch,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from .decoding import (
    DecodeResult,
    DecodeSettings,
    at_beam,
    at_greedy,
    glat_decode,
    mask_predict,
)
from .metrics import MetricsReport, corpus_bleu, repetition_ratio, word_accuracy
from .model import (
    AT,
    NAT,
    ArchConfig,
    EncoderOutput,
    TransformerModel,
    arch_preset,
    decoder_forward,
    encode,
    init_model,
    load_model,
    param_count,
    predict_length,
    save_model,
)
from .optim import adam_init, adam_step
from .pipeline import PipelineConfig, run_pipeline
from .probes import ProbeReport, run_probe
from .speed import SpeedReport, measure_speed1, measure_speedmax, speedup_report
from .training import (
    TrainConfig,
    distill_corpus,
    select_and_average_checkpoints,
    train_at_step,
    train_cmlm_step,
    train_glat_step,
    train_model,
)

__version__ = "0.1.0"
