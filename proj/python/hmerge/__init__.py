"""Parameter-space merging of transformer checkpoints."""

from ._hmerge import (
    HmergeError,
    align_heads,
    breadcrumbs_mask,
    dare_drop_rescale,
    della_magprune,
    gen_toy,
    inspect,
    layer_weight,
    linear_average,
    linear_sum_assignment,
    load,
    merge,
    save,
    task_arithmetic,
    ties_sign_consensus,
)

__all__ = [
    "HmergeError",
    "align_heads",
    "breadcrumbs_mask",
    "dare_drop_rescale",
    "della_magprune",
    "gen_toy",
    "inspect",
    "layer_weight",
    "linear_average",
    "linear_sum_assignment",
    "load",
    "merge",
    "save",
    "task_arithmetic",
    "ties_sign_consensus",
]
