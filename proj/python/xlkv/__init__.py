from ._xlkv import (
    Engine,
    XlkvError,
    allocate_budget,
    factorize_group,
    max_ratio,
    merge_group,
    self_check,
    svd_factorization_error,
)

__all__ = [
    "Engine",
    "XlkvError",
    "allocate_budget",
    "factorize_group",
    "max_ratio",
    "merge_group",
    "self_check",
    "svd_factorization_error",
]
