"""Dense NHWC tensors with reverse-mode differentiation."""

from .core import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    as_tensor,
    get_dtype,
    no_record,
    parameter,
    precision,
    set_debug,
    set_dtype,
)
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    add,
    avg_pool,
    batch_norm,
    clip,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    depthwise_separable_conv,
    embedding_lookup,
    exp,
    factored_conv_1xN_Nx1,
    global_avg_pool,
    linear,
    log,
    log_softmax,
    lstm_step,
    max_pool,
    mean,
    minimum,
    mul,
    neg,
    pick,
    relu,
    same_padding,
    softmax,
    sub,
    sum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
