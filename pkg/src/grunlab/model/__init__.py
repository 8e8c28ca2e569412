from .checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from .tokenizer import Tokenizer
from .transformer import (
    Batch,
    ForwardOutput,
    KVCache,
    Model,
    ModelConfig,
    answer_logprob,
    answer_nll,
    forward,
    generate_batch,
    generate_greedy,
    generate_uncached,
    make_batch,
    param_shapes,
    sequence_nll,
)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model.build(config, seed)
