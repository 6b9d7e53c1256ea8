"""Desk-scale compositional zero-shot learning with alternating-freeze prompt tuning."""

__version__ = "0.1.0"

from .composition_space import (
    CompositionSpace,
    EntanglementStats,
    WeightConfig,
    composition_weight,
    compute_entanglement,
    load_space,
    save_space,
    seen_weight_table,
    validate_space,
)
from .data import (
    Dataset,
    Sample,
    SynthConfig,
    batch_iter,
    load_features,
    save_features,
    synth_generate,
)
from .errors import DataError, NumericError
from .evaluation import (
    EvalReport,
    ScoreMatrix,
    biased_accuracy,
    score_matrix,
    sweep_auc,
    topk_image_retrieval,
    topk_text_retrieval,
)
from .model import (
    FrozenEncoders,
    PromptTable,
    class_logits,
    encode_image,
    encode_text,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    similarity_probs,
)
from .training import (
    AdamState,
    Batch,
    StatusSchedule,
    TrainerConfig,
    TrainHistory,
    TrainStatus,
    adam_step,
    batch_gradients,
    batch_loss,
    finite_diff_check,
    make_batch,
    status_for_epoch,
    train,
)
