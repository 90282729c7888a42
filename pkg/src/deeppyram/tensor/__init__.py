from .conv import conv2d, conv2d_direct, conv_output_size, transposed_conv2d
from .functional import (
    adaptive_avg_pool2d,
    avg_pool2d,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    global_avg_pool,
    hardtanh,
    layer_norm,
    max_pool2d,
    pixel_shuffle,
    relu,
    sigmoid,
    softmax_channels,
)
from .gradcheck import GradCheckResult, numeric_grad_check, relative_error
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    log,
    make_result,
    mean,
    mul,
    narrow,
    no_grad,
    reshape,
    sub,
    take_channels,
    tsum,
)
