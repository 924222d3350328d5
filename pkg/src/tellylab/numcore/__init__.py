from .functional import (
    DegenerateVectorError,
    binary_cross_entropy_with_logits,
    cosine_matrix,
    cosine_similarity,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    sigmoid,
    softmax,
)
from .gradcheck import check_leaves, grad_check, relative_error
from .optim import Adam, AdamState, OptimizerStateError, Parameter, adam_step, checksum
from .rng import RngStream
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    concat,
    default_dtype,
    exp,
    log,
    matmul,
    mean,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    set_precision,
    sqrt,
    tabs,
    tanh,
    transpose,
    tsum,
)
