"""fintree: prompt-pattern relation extraction toolkit.

Pipeline stages: schema (labels and type compatibility), data loading,
prompting (query pattern, position markers, encoding), modeling (backbones,
mask-position head, constrained prediction), further pretraining,
fine-tuning with adversarial weight perturbation, evaluation and ensembling.
"""

from .data import Dataset, REInstance, Split, load_instances, split_stats
from .evaluation import (
    EvalReport,
    PredictionSet,
    f1_scores,
    hard_vote,
    predict_dataset,
    run_ablation,
)
from .modeling import (
    EncoderBackbone,
    RelationHead,
    RelationLogits,
    RelationModel,
    TinyEncoder,
    apply_constraint_mask,
    build_model,
    forward_logits,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .pretraining import (
    CorpusDocument,
    MLMExample,
    filter_corpus,
    further_pretrain,
    make_mlm_example,
)
from .prompting import (
    DEFAULT_MARKERS,
    DEFAULT_TEMPLATE,
    HashingTokenizer,
    PromptEncoding,
    TokenizerInterface,
    build_query,
    encode_example,
    insert_entity_markers,
)
from .schema import (
    CompatibilityTable,
    LabelRegistry,
    RelationLabel,
    allowed_labels,
    build_compatibility,
    parse_label,
)
from .training import TrainConfig, TrainingLog, awp_step, finetune, lr_at_step, set_seed

__version__ = "0.1.0"
