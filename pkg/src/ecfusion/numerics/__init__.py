"""Differentiable float64 grid ops, optimizer, PRNG and gradient checking."""
from .autodiff import (
    Node,
    abs_,
    add,
    as_node,
    backward,
    concat,
    conv2d,
    cost_volume,
    div,
    exp,
    index,
    layer_norm,
    layer_scale_add,
    leaf,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    pointwise,
    power,
    relu,
    reshape,
    sample,
    sigmoid,
    softmax,
    sub,
    sum_,
    swap_last,
    transpose,
    value_of,
    warp,
)
from .gradcheck import GradCheck, check_gradients, max_rel_err
from .kernels import BACKEND
from .optim import Adam, adam_step
from .rng import Rng
