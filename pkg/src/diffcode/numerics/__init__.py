from .functional import (
    channel_norm,
    conv2d,
    cross_entropy,
    global_avg_pool,
    l1_loss,
    linear,
    log_softmax,
    logsumexp,
    mse_loss,
    softmax,
    upsample_nearest,
)
from .io import load_tensor, read_tensor, save_tensor, tensor_bytes, write_tensor
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    getitem,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    ones,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    stop_gradient,
    straight_through,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
    unbroadcast,
    zeros,
)
from .gradcheck import gradcheck, numerical_grad

__all__ = [name for name in dir() if not name.startswith("_")]
