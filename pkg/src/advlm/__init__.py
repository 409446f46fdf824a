"""advlm: adversarial robustness harness for toy vision-language models.

A hand-rolled autodiff engine, two small generative VLMs differing only
in their fusion mechanism, white-box gradient attacks (FGSM, PGD, CW-L2),
a VQA scoring protocol, and a config-driven evaluation CLI.
"""

from .autodiff import (
    ComputationGraph,
    ContractViolation,
    GradientMap,
    Tensor,
    backward,
    grad_check,
)
from .attacks import (
    AttackError,
    AttackResult,
    CwParams,
    Norm,
    PgdParams,
    ThreatModel,
    cw_l2,
    fgsm,
    hyperparameter_schedule,
    pgd,
    project_linf,
)
from .models import (
    AnswerText,
    FusionKind,
    Question,
    ToyVlmConfig,
    ToyVlmParams,
    generate_answer,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_toy,
    vlm_loss,
)
from .vqa import (
    EvalRecord,
    EvalReport,
    VqaSample,
    accuracy_drop,
    margin_of_error,
    normalize_answer,
    sample_subset,
    vqa_accuracy,
    vqa_match,
)
from .data import SyntheticSpec, gen_dataset
from .harness import RunConfig, emit_report, load_run_config, run_eval

__version__ = "0.1.0"
