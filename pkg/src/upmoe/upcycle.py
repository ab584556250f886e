"""Dense-to-MoE model conversion via exact weight reuse.

Every block's FFN is duplicated into N identical experts and all remaining
parameters are copied verbatim, so the converted model reproduces the dense
model's outputs before any continued training. Routers start at zero (plus
optional seeded noise): identical experts give the router no task gradient,
so the noise knob is the only symmetry breaker.
"""

from __future__ import annotations

import re

import numpy as np

from .autograd import Tensor
from .model import DenseModel, MoEModel
from .moe import MoEConfig

_EXPERT_RE = re.compile(r"\.moe\.expert\d+\.")


class UpcycleError(ValueError):
    """The model/config pair cannot be transformed."""


class ContractError(TypeError):
    """An operation was called on the wrong kind of model."""


def upcycle(dense: DenseModel, moe_config: MoEConfig, seed: int = 0) -> MoEModel:
    """Expand a dense checkpoint into an MoE model with copied experts."""
    if getattr(dense, "kind", None) != "dense":
        raise UpcycleError(f"expected a dense model, got kind={getattr(dense, 'kind', None)!r}")
    cfg = dense.config
    dtype = dense.params["head.W"].dtype
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in MoEModel.parameter_shapes(cfg, moe_config.n_experts).items():
        if name.endswith(".moe.router.W"):
            arr = np.zeros(shape, dtype=dtype)
            if moe_config.router_noise_std > 0:
                arr += rng.normal(0.0, moe_config.router_noise_std, size=shape).astype(dtype)
        elif ".moe.expert" in name:
            arr = dense.params[_EXPERT_RE.sub(".ffn.", name)].data.copy()
        else:
            arr = dense.params[name].data.copy()
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return MoEModel(cfg, moe_config, params)


def build_freeze_mask(model: MoEModel) -> set[str]:
    """Names of the parameters continued training may update.

    Exactly the expert FFNs and the routers; down-sampling, attention,
    layer norms, and the output head stay frozen.
    """
    if getattr(model, "kind", None) != "moe":
        raise ContractError(
            f"freeze mask is defined for MoE models only, got kind={getattr(model, 'kind', None)!r}"
        )
    return {name for name in model.params if ".moe." in name}


def trainable_manifest(model) -> list[str]:
    """Default trainable-parameter list serialized with a checkpoint."""
    if model.kind == "moe":
        mask = build_freeze_mask(model)
        return [name for name in model.parameter_names() if name in mask]
    return model.parameter_names()
