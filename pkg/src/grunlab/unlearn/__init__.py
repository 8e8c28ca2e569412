from .losses import (
    METHODS,
    MODES,
    UnlearnConfig,
    assign_templates,
    gate_loss,
    gd_loss,
    idk_loss,
    last_prompt_states,
    npo_forget_term,
    npo_loss,
    random_direction,
    reference_logprobs,
    rmu_loss,
)
from .trainer import UnlearnData, UnlearnResult, train_unlearn, write_log
