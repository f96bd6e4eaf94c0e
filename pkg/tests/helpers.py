import numpy as np

from src.importance import WidthImportance
from src.model import ParamSet, is_norm, param_shapes


def random_params(cfg, seed=0, std=0.4, dtype=np.float64):
    """Larger-than-init weights so every gradient path carries signal."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if is_norm(name):
            tensors[name] = (1.0 + 0.3 * rng.standard_normal(shape)).astype(dtype)
        else:
            tensors[name] = (std * rng.standard_normal(shape)).astype(dtype)
    return ParamSet(cfg, tensors)


def identity_layers(params, layers):
    """Zero the output projections so the listed layers pass the residual through."""
    out = params.copy()
    for i in layers:
        out.tensors[f"layer.{i}.attn.o"][:] = 0.0
        out.tensors[f"layer.{i}.mlp.down"][:] = 0.0
    return out


def restrict_importance(imp, plan):
    """Scores of the units a keep plan retains, for trimming the trimmed model again."""
    layers = sorted(plan.neurons)
    return WidthImportance(
        neurons=np.stack([imp.neurons[i][plan.neurons[i]] for i in layers]),
        heads=np.stack([imp.heads[i][plan.heads[i]] for i in layers]),
        channels=imp.channels[plan.channels],
        metadata=dict(imp.metadata))
