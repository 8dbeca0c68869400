from .core import (
    ACTIVATIONS,
    DEFAULT_DTYPE,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    embedding,
    exp,
    getitem,
    group_norm,
    identity,
    is_grad_enabled,
    layer_norm,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    silu,
    softmax,
    square,
    squared_error,
    sum_,
    transpose,
    upsample_nearest,
)
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .optim import AdamState, adam_step, mask_embedding_gradient
from .rng import RngStream
