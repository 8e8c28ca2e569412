from .config import ExperimentConfig, config_from_dict, load_config
from .pipeline import (
    BaseArtifacts,
    ExperimentResult,
    emit_report,
    evaluate,
    prepare_base,
    quantize_array,
    quantize_roundtrip,
    run_experiment,
    run_sequential,
)
