"""Desk-scale unified text+image autoregressive model with routed output
heads, an asymmetric image path, and a staged-freezing fine-tuning schedule
over exactly checkable synthetic tasks.
"""

from .vocab import Head, Mode, VocabLayout, check_sequence, head_of, step_mode, validate_sequence
from .codec import (
    ImageGrid,
    ImageSegment,
    Sample,
    TextSegment,
    TextVocab,
    Turn,
    build_text_vocab,
    decode_image,
    decode_text,
    encode_image,
    encode_text,
    render_prompt,
    render_sample,
)
from .data import (
    PatternSpec,
    gen_t2i,
    gen_t2t,
    gen_t2ti,
    gen_ti2t,
    grid_of,
    read_dataset,
    write_dataset,
)
from .model import (
    ForwardOutput,
    GridLM,
    ModelConfig,
    added_fraction,
    count_params,
    init_params,
    param_groups,
)
from .losses import LossBreakdown, LossWeights, image_loss, text_loss, total_loss
from .checkpoint import group_digests, load_checkpoint, save_checkpoint
from .training import (
    FreezeManifest,
    StagePlan,
    TrainReport,
    default_plan,
    pretrain_base,
    run_stage,
    train_joint_baseline,
)
from .generate import Reply, SamplerSpec, generate, generate_many, sample_token
from .evals import (
    AblationReport,
    GenReport,
    RetentionReport,
    eval_generation,
    eval_modality_choice,
    eval_retention,
    run_ablation,
)
from .errors import (
    CapacityError,
    CheckpointError,
    CodecError,
    DatasetError,
    GenerationError,
    GridLMError,
    SequenceError,
    TrainingError,
    VocabError,
)

__version__ = "0.1.0"
