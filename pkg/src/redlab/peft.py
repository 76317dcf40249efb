"""Parameter-efficient fine-tuning methods as forward hooks on a frozen model.

Representation editing keeps one learnable scaling vector and one learnable
bias vector per edited site; LoRA adds a parallel low-rank update to the query
and value projections; adapters insert a residual bottleneck MLP at a site;
BitFit and full fine-tuning only change which base parameters train.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import HOOK_SITES, TransformerModel, _json_member, _le, _read_json_member
from .rng import stream
from .tensor import Tensor

TRAINABLE_METHODS = ("red", "lora", "adapter", "adapter_ffn", "bitfit", "full_ft")
# Counted by the audit module only; the lab never trains these.
AUDIT_ONLY_METHODS = ("prefix", "prompt", "ft_top2")
POSITIONS = ("ffn", "attn", "both")
COMPONENT_MASKS = ("both", "scaling_only", "bias_only")
ADAPTER_ACTIVATIONS = ("gelu", "relu", "identity")

PEFT_FORMAT = "redlab.peft.v1"


class PeftError(ValueError):
    """Invalid PEFT specification or attachment request."""


@dataclass
class PeftSpec:
    method: str
    rank: int | None = None
    alpha: float | None = None
    positions: str = "ffn"
    component_mask: str = "both"
    adapter_activation: str = "gelu"
    prefix_len: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in TRAINABLE_METHODS + AUDIT_ONLY_METHODS:
            raise PeftError(f"unknown PEFT method {self.method!r}")
        if self.method in ("lora", "adapter", "adapter_ffn"):
            if self.rank is None:
                raise PeftError(f"method {self.method!r} requires a rank")
            if not isinstance(self.rank, int) or self.rank < 1:
                raise PeftError(f"rank must be an int >= 1, got {self.rank!r}")
        if self.method in ("prefix", "prompt") and (self.prefix_len is None or self.prefix_len < 1):
            raise PeftError(f"method {self.method!r} requires prefix_len >= 1")
        if self.positions not in POSITIONS:
            raise PeftError(f"positions must be one of {POSITIONS}, got {self.positions!r}")
        if self.component_mask not in COMPONENT_MASKS:
            raise PeftError(f"component_mask must be one of {COMPONENT_MASKS}, got {self.component_mask!r}")
        if self.adapter_activation not in ADAPTER_ACTIVATIONS:
            raise PeftError(f"adapter_activation must be one of {ADAPTER_ACTIVATIONS}")

    @property
    def lora_scale(self) -> float:
        alpha = self.rank if self.alpha is None else self.alpha
        return float(alpha) / self.rank

    @property
    def sites(self) -> tuple:
        """Representation sites engaged per block (red / adapter variants)."""
        if self.method == "red":
            return HOOK_SITES if self.positions == "both" else (self.positions,)
        if self.method == "adapter":
            return HOOK_SITES
        if self.method == "adapter_ffn":
            return ("ffn",)
        return ()

    def label(self) -> str:
        if self.method == "red":
            parts = ["red", self.positions]
            if self.component_mask != "both":
                parts.append(self.component_mask)
            return "/".join(parts)
        if self.rank is not None:
            return f"{self.method}(r={self.rank})"
        return self.method

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PeftSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PeftError(f"unknown PeftSpec keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# edit vectors


@dataclass
class EditVectorPair:
    scaling: Tensor | None
    bias: Tensor | None
    component_mask: str = "both"

    def parameters(self):
        if self.scaling is not None:
            yield "scaling", self.scaling
        if self.bias is not None:
            yield "bias", self.bias


def init_edit_vectors(d: int, component_mask: str = "both") -> EditVectorPair:
    """Scaling starts at exactly one and bias at exactly zero, so the edit is the identity."""
    if component_mask not in COMPONENT_MASKS:
        raise PeftError(f"unknown component_mask {component_mask!r}")
    dtype = T.get_dtype()
    scaling = bias = None
    if component_mask in ("both", "scaling_only"):
        scaling = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    if component_mask in ("both", "bias_only"):
        bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return EditVectorPair(scaling, bias, component_mask)


def red_edit(h1: Tensor, ev: EditVectorPair) -> Tensor:
    """``scaling * h1 + bias`` broadcast over every leading axis of ``h1``."""
    d = h1.shape[-1]
    for _, v in ev.parameters():
        if v.shape != (d,):
            raise T.ShapeError(f"edit vector of shape {v.shape} does not match representation width {d}")
    h2 = h1
    if ev.scaling is not None:
        h2 = T.mul(h2, ev.scaling)
    if ev.bias is not None:
        h2 = T.add(h2, ev.bias)
    return h2


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraPair:
    down: Tensor  # [d, r]
    up: Tensor  # [r, k]
    alpha: float
    r: int

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def parameters(self):
        yield "down", self.down
        yield "up", self.up

    def delta(self) -> np.ndarray:
        """Materialised weight update ``scale * down @ up``."""
        return self.scale * (self.down.data @ self.up.data)


def init_lora(d: int, k: int, r: int, alpha: float, rng: np.random.Generator) -> LoraPair:
    dtype = T.get_dtype()
    bound = 1.0 / math.sqrt(d)
    down = Tensor(rng.uniform(-bound, bound, size=(d, r)).astype(dtype), requires_grad=True)
    up = Tensor(np.zeros((r, k), dtype=dtype), requires_grad=True)
    return LoraPair(down, up, float(alpha), r)


def lora_forward(x: Tensor, W: Tensor, lp: LoraPair, bias: Tensor | None = None) -> Tensor:
    """``x @ W (+ bias) + scale * x @ down @ up``."""
    if W.shape[0] != lp.down.shape[0] or W.shape[1] != lp.up.shape[1] or lp.down.shape[1] != lp.up.shape[0]:
        raise T.ShapeError(f"lora: W {W.shape} incompatible with down {lp.down.shape} / up {lp.up.shape}")
    base = T.matmul(x, W)
    if bias is not None:
        base = T.add(base, bias)
    update = T.matmul(T.matmul(x, lp.down), lp.up)
    return T.add(base, T.scale(update, lp.scale))


# ---------------------------------------------------------------------------
# adapters


@dataclass
class AdapterBlock:
    down_w: Tensor  # [d, r]
    down_b: Tensor  # [r]
    up_w: Tensor  # [r, d]
    up_b: Tensor  # [d]
    activation: str = "gelu"

    def parameters(self):
        yield "down.weight", self.down_w
        yield "down.bias", self.down_b
        yield "up.weight", self.up_w
        yield "up.bias", self.up_b


def init_adapter(d: int, r: int, rng: np.random.Generator, activation: str = "gelu") -> AdapterBlock:
    dtype = T.get_dtype()
    bound = 1.0 / math.sqrt(d)
    return AdapterBlock(
        down_w=Tensor(rng.uniform(-bound, bound, size=(d, r)).astype(dtype), requires_grad=True),
        down_b=Tensor(np.zeros(r, dtype=dtype), requires_grad=True),
        up_w=Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True),
        up_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        activation=activation,
    )


_ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu, "identity": lambda t: t}


def adapter_forward(h1: Tensor, ab: AdapterBlock) -> Tensor:
    """``h1 + f(h1 @ down_w + down_b) @ up_w + up_b``."""
    d = h1.shape[-1]
    if ab.down_w.shape[0] != d or ab.up_w.shape[1] != d:
        raise T.ShapeError(f"adapter: width {d} incompatible with down {ab.down_w.shape} / up {ab.up_w.shape}")
    f = _ACTIVATIONS[ab.activation]
    z = f(T.add(T.matmul(h1, ab.down_w), ab.down_b))
    return T.add(h1, T.add(T.matmul(z, ab.up_w), ab.up_b))


# ---------------------------------------------------------------------------
# hooks and attachment


class PeftHooks:
    """Callbacks consulted by :func:`redlab.model.forward`.

    ``edits`` maps ``(block, site)`` to an EditVectorPair or AdapterBlock;
    ``loras`` maps ``(block, "q" | "v")`` to a LoraPair.
    """

    def __init__(self):
        self.edits: dict = {}
        self.loras: dict = {}

    def __bool__(self):
        return bool(self.edits or self.loras)

    def edit(self, block: int, site: str, h: Tensor) -> Tensor:
        mod = self.edits.get((block, site))
        if mod is None:
            return h
        if isinstance(mod, EditVectorPair):
            return red_edit(h, mod)
        return adapter_forward(h, mod)

    def project(self, block: int, name: str, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        lp = self.loras.get((block, name))
        if lp is None:
            return T.add(T.matmul(x, w), b)
        return lora_forward(x, w, lp, bias=b)

    def named_parameters(self):
        """(registry name, tensor) for every add-on parameter, in a fixed order."""
        for (blk, site), mod in sorted(self.edits.items()):
            prefix = "red" if isinstance(mod, EditVectorPair) else "adapter"
            for pname, t in mod.parameters():
                yield f"{prefix}.block.{blk}.{site}.{pname}", t
        for (blk, proj), lp in sorted(self.loras.items()):
            for pname, t in lp.parameters():
                yield f"lora.block.{blk}.attn.{proj}.{pname}", t


def select_bitfit_params(model: TransformerModel) -> list:
    """Names of encoder-block bias terms, LN biases included; embeddings and head excluded."""
    return [n for n in model.params if n.startswith("block.") and n.endswith(".bias")]


def attach_peft(model: TransformerModel, spec: PeftSpec, seed: int = 0):
    """Freeze the base model as ``spec`` requires and build the add-on modules.

    Returns ``(hooks, registry)`` where registry is an ordered name -> Tensor
    map of everything the optimizer may update.
    """
    spec.validate()
    if spec.method not in TRAINABLE_METHODS:
        raise PeftError(f"method {spec.method!r} is audit-only and cannot be attached")
    cfg = model.config
    d = cfg.d_model
    rng = stream(seed, "peft_init")
    model.freeze()
    hooks = PeftHooks()

    if spec.method == "red":
        for i in range(cfg.n_layers):
            for site in spec.sites:
                hooks.edits[(i, site)] = init_edit_vectors(d, spec.component_mask)
    elif spec.method == "lora":
        alpha = spec.rank if spec.alpha is None else spec.alpha
        for i in range(cfg.n_layers):
            for proj in ("q", "v"):
                hooks.loras[(i, proj)] = init_lora(d, d, spec.rank, alpha, rng)
    elif spec.method in ("adapter", "adapter_ffn"):
        for i in range(cfg.n_layers):
            for site in spec.sites:
                hooks.edits[(i, site)] = init_adapter(d, spec.rank, rng, spec.adapter_activation)

    registry = OrderedDict()
    if spec.method == "bitfit":
        for name in select_bitfit_params(model):
            model[name].requires_grad = True
            registry[name] = model[name]
    elif spec.method == "full_ft":
        for name, p in model.named_parameters():
            p.requires_grad = True
            registry[name] = p
    for name, t in hooks.named_parameters():
        t.name = name
        registry[name] = t
    return hooks, registry


def frozen_names(model: TransformerModel) -> list:
    return [n for n, p in model.named_parameters() if not p.requires_grad]


def frozen_digest(model: TransformerModel) -> str:
    """SHA-256 over name, shape, dtype and bytes of every frozen base parameter.

    When nothing is frozen (full fine-tuning) the digest covers every base
    parameter, so any update to the base weights changes it.
    """
    names = frozen_names(model) or list(model.params)
    h = hashlib.sha256()
    for name in names:
        arr = np.ascontiguousarray(model[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def count_trainable(registry) -> int:
    return sum(t.size for t in registry.values())


# ---------------------------------------------------------------------------
# PEFT checkpoints
#
# Same container as base checkpoints: an .npz with one little-endian array per
# registry name plus "__format__" (PEFT_FORMAT) and "__peft__" (PeftSpec JSON)
# members.  Loading needs only a model built from the matching config.


def save_peft(path, spec: PeftSpec, registry) -> None:
    members = {name: _le(t.data) for name, t in registry.items()}
    members["__format__"] = _json_member(PEFT_FORMAT)
    members["__peft__"] = _json_member(spec.to_dict())
    with open(Path(path), "wb") as fh:
        np.savez(fh, **members)


def load_peft(path, model: TransformerModel, seed: int = 0):
    """Attach the stored method to ``model`` and overwrite its registry with the saved arrays."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format__" not in z.files or _read_json_member(z["__format__"]) != PEFT_FORMAT:
            raise ValueError(f"{path}: not a {PEFT_FORMAT} checkpoint")
        spec = PeftSpec.from_dict(_read_json_member(z["__peft__"]))
        hooks, registry = attach_peft(model, spec, seed=seed)
        stored = [n for n in z.files if not n.startswith("__")]
        if sorted(stored) != sorted(registry):
            raise ValueError(f"{path}: stored parameters do not match a fresh {spec.method} registry")
        for name, t in registry.items():
            arr = z[name]
            if arr.shape != t.shape:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype)
    return spec, hooks, registry

