from .gradcheck import GradCheckReport, check_gradients
from .optim import Optimizer, OptimizerState, optimizer_step
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    getitem,
    grad,
    index_put,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    parameters_checksum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softplus,
    stack,
    sum_,
    swapaxes,
    tanh,
    toposort,
    transpose,
)
