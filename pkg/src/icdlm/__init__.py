"""Tiny sequence models that compose in-context demonstration sets.

A synthetic world with an exactly computable Bayesian predictor stands in
for the heavyweight scorer, which makes every stage of the pipeline (data
construction, training, decoding, evaluation) reproducible to the bit.
"""

from .baselines import BaselineKind, cosine, retrieve
from .construction import (
    SubSupportStrategy,
    beam_build,
    build_dataset,
    sample_sub_support,
    split_anchor_set,
)
from .decoding import (
    DecodeConfig,
    GoldenMethod,
    generate,
    golden_extract,
    null_query,
    read_generation,
    truncate_sequence,
    write_generation,
)
from .errors import (
    CapabilityError,
    ConfigError,
    NumericError,
    ParseError,
    SchemaError,
    ToolkitError,
)
from .evaluation import (
    COMPOSER_METHOD,
    GOLDEN_METHOD,
    EvalReport,
    MethodReport,
    MethodSpec,
    OrderAblation,
    aggregate,
    baseline_method,
    composer_method,
    emit_report,
    evaluate_method,
    fixed_method,
    golden_method,
    load_report,
    random_order_ablation,
    render_markdown,
    save_report,
)
from .model import (
    ModelParams,
    SupportFeatures,
    Vocabulary,
    batch_loss,
    batch_loss_and_grads,
    forward,
    init_params,
    load_model,
    log_softmax,
    save_model,
    sequence_loss,
)
from .records import (
    ConstructionConfig,
    DataConfig,
    EvalConfig,
    Example,
    ICDSequence,
    ModelConfig,
    RunConfig,
    TrainingConfig,
    WorldConfig,
    canonical_json,
    config_digest,
    deserialize_examples,
    digest_of,
    make_example,
    read_construction_records,
    serialize_examples,
    world_digest_of,
    write_construction_records,
)
from .scoring import ScorerKind, confidence, gain, score_key, select_best, sequence_score
from .training import (
    TrainState,
    gradient_check,
    lr_at,
    optimizer_step,
    read_loss_history,
    train,
    write_loss_history,
)
from .world import (
    SynthWorld,
    oracle_accuracy,
    oracle_log_evidence,
    oracle_posterior,
    oracle_predict,
    sample_examples,
    world_from_config,
    world_generate,
    world_load,
    world_save,
)

__version__ = "0.1.0"
