from seqrec.numcore.gradcheck import (
    NondeterministicError,
    PrecisionError,
    finite_difference_check,
)
from seqrec.numcore.tensor import (
    PRIMITIVE_KINDS,
    NonFiniteError,
    NumcoreError,
    ShapeError,
    Tape,
    TapeConsumedError,
    Tensor,
    add,
    backward,
    concat_rows,
    cosine_rows,
    dropout,
    embedding_gather,
    forward_primitive,
    layernorm_rows,
    logistic_bce,
    matmul,
    multiply,
    reduce_mean,
    relu,
    reshape,
    scale,
    softmax_rows,
    tensor,
    transpose,
)

__all__ = [
    "PRIMITIVE_KINDS", "NonFiniteError", "NumcoreError", "ShapeError",
    "Tape", "TapeConsumedError", "Tensor", "NondeterministicError",
    "PrecisionError", "add", "backward", "concat_rows", "cosine_rows",
    "dropout", "embedding_gather", "finite_difference_check",
    "forward_primitive", "layernorm_rows", "logistic_bce", "matmul",
    "multiply", "reduce_mean", "relu", "reshape", "scale", "softmax_rows",
    "tensor", "transpose",
]
