"""Small post-LN transformer encoder classifier used as the frozen base model."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor

# Representation sites a hook may edit inside every block, in forward order.
HOOK_SITES = ("attn", "ffn")

CHECKPOINT_FORMAT = "redlab.checkpoint.v1"


@dataclass
class TransformerConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    n_classes: int
    d_ff: int | None = None
    ln_style: str = "post_ln"
    ln_eps: float = 1e-5
    activation: str = "gelu"
    # Edit hook placement: False edits after residual + LN, True edits the raw sub-layer output.
    pre_residual: bool = False

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len", "n_classes", "d_ff"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"TransformerConfig.{name} must be a positive int, got {v!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.ln_style != "post_ln":
            raise ValueError(f"unsupported ln_style {self.ln_style!r}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TransformerConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: TransformerConfig) -> "OrderedDict[str, tuple]":
    """Dotted name -> shape for every base parameter, in canonical order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = OrderedDict()
    shapes["embed.token.weight"] = (cfg.vocab_size, d)
    shapes["embed.position.weight"] = (cfg.max_seq_len, d)
    for i in range(cfg.n_layers):
        p = f"block.{i}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.ln1.weight"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ffn.w_in.weight"] = (d, f)
        shapes[f"{p}.ffn.w_in.bias"] = (f,)
        shapes[f"{p}.ffn.w_out.weight"] = (f, d)
        shapes[f"{p}.ffn.w_out.bias"] = (d,)
        shapes[f"{p}.ln2.weight"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.n_classes)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


class TransformerModel:
    def __init__(self, config: TransformerConfig, params: "OrderedDict[str, Tensor]"):
        expected = param_shapes(config)
        if list(expected) != list(params):
            raise ValueError("parameter names do not match the config layout")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
            params[name].name = name
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, tokens, hooks=None, mask=None) -> Tensor:
        return forward(self, tokens, hooks=hooks, mask=mask)

    def save(self, path) -> None:
        save_checkpoint(path, self.config, {k: v.data for k, v in self.params.items()})


def _xavier_uniform(rng, shape, dtype):
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_model(config: TransformerConfig, seed: int) -> TransformerModel:
    """Xavier-uniform matrices, zero biases, unit LN gains; all frozen."""
    config.validate()
    rng = stream(seed, "model_init")
    dtype = T.get_dtype()
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            arr = _xavier_uniform(rng, shape, dtype)
        elif name.startswith("block.") and ".ln" in name and name.endswith(".weight"):
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(arr, dtype=dtype)
    return TransformerModel(config, params)


def _project(hooks, block, name, x, w, b):
    if hooks is not None:
        return hooks.project(block, name, x, w, b)
    return T.add(T.matmul(x, w), b)


def _edit(hooks, block, site, h):
    if hooks is None:
        return h
    return hooks.edit(block, site, h)


def _attention(model, i, x, mask, hooks):
    cfg = model.config
    p = f"block.{i}.attn"
    bsz, seq, d = x.shape
    nh, hd = cfg.n_heads, cfg.head_dim

    def heads(t):
        return T.transpose(T.reshape(t, (bsz, seq, nh, hd)), (0, 2, 1, 3))

    q = heads(_project(hooks, i, "q", x, model[f"{p}.q.weight"], model[f"{p}.q.bias"]))
    k = heads(T.add(T.matmul(x, model[f"{p}.k.weight"]), model[f"{p}.k.bias"]))
    v = heads(_project(hooks, i, "v", x, model[f"{p}.v.weight"], model[f"{p}.v.bias"]))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    key_mask = None if mask is None else mask[:, None, None, :]
    probs = T.softmax(scores, mask=key_mask)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (bsz, seq, d))
    return T.add(T.matmul(ctx, model[f"{p}.o.weight"]), model[f"{p}.o.bias"])


def _ffn(model, i, h):
    p = f"block.{i}.ffn"
    act = T.gelu if model.config.activation == "gelu" else T.relu
    z = act(T.add(T.matmul(h, model[f"{p}.w_in.weight"]), model[f"{p}.w_in.bias"]))
    return T.add(T.matmul(z, model[f"{p}.w_out.weight"]), model[f"{p}.w_out.bias"])


def forward(model: TransformerModel, tokens, hooks=None, mask=None) -> Tensor:
    """Logits ``[batch, n_classes]`` for integer ``tokens[batch, seq]``.

    ``hooks`` (a :class:`redlab.peft.PeftHooks` or None) may rewrite the q/v
    projections and the representation at each of the two sites per block.
    ``mask`` marks real (non-padding) positions.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    bsz, seq = tokens.shape
    if seq > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tokens.shape:
            raise ValueError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")

    positions = np.broadcast_to(np.arange(seq), (bsz, seq))
    x = T.add(T.embedding(model["embed.token.weight"], tokens),
              T.embedding(model["embed.position.weight"], positions))
    eps = cfg.ln_eps
    for i in range(cfg.n_layers):
        b = f"block.{i}"
        a = _attention(model, i, x, mask, hooks)
        if cfg.pre_residual:
            a = _edit(hooks, i, "attn", a)
        h = T.layer_norm(T.add(x, a), model[f"{b}.ln1.weight"], model[f"{b}.ln1.bias"], eps)
        if not cfg.pre_residual:
            h = _edit(hooks, i, "attn", h)
        f = _ffn(model, i, h)
        if cfg.pre_residual:
            f = _edit(hooks, i, "ffn", f)
        x = T.layer_norm(T.add(h, f), model[f"{b}.ln2.weight"], model[f"{b}.ln2.bias"], eps)
        if not cfg.pre_residual:
            x = _edit(hooks, i, "ffn", x)
    pooled = T.mean_pool(x, mask)
    return T.add(T.matmul(pooled, model["head.weight"]), model["head.bias"])


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed .npz archive.  Each base parameter is stored
# under its dotted name as a little-endian float array ("<f4" or "<f8") whose
# shape is the parameter shape.  Two extra members hold metadata as UTF-8 JSON
# in uint8 arrays: "__format__" (the string CHECKPOINT_FORMAT) and
# "__config__" (TransformerConfig fields).


def _json_member(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _read_json_member(arr) -> object:
    return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, config: TransformerConfig, arrays: dict) -> None:
    members = {name: _le(a) for name, a in arrays.items()}
    members["__format__"] = _json_member(CHECKPOINT_FORMAT)
    members["__config__"] = _json_member(config.to_dict())
    with open(Path(path), "wb") as fh:
        np.savez(fh, **members)


def load_model(path) -> TransformerModel:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format__" not in z.files or _read_json_member(z["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        config = TransformerConfig.from_dict(_read_json_member(z["__config__"]))
        params = OrderedDict()
        for name in param_shapes(config):
            if name not in z.files:
                raise ValueError(f"{path}: missing parameter {name}")
            arr = z[name]
            params[name] = Tensor(arr, dtype=arr.dtype.newbyteorder("="))
    return TransformerModel(config, params)
