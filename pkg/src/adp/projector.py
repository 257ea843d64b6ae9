"""Feature projector: transformer block with learnable key/value attention.

Queries come from the input features; keys and values come from a learnable
reference matrix projected once to the hidden width and shared across layers.
The attention output is merged into the input by subtraction (it is trained
to capture normal patterns, which subtraction removes); the MLP keeps the
conventional additive residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class ProjectorConfig:
    num_layers: int = 1
    n_r: int = 2048
    hidden_width: int | None = None  # None -> input width; must equal it (subtraction merge)
    n_heads: int = 8
    init_seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("projector: num_layers must be >= 1")
        if self.n_r < 1:
            raise ValueError("projector: n_r must be >= 1")


@dataclass
class ProjectorParams:
    """Named weight arrays for one feature level."""

    arrays: dict[str, np.ndarray]
    width: int
    n_r: int
    n_heads: int
    num_layers: int

    def astype(self, dtype) -> "ProjectorParams":
        return ProjectorParams({k: v.astype(dtype) for k, v in self.arrays.items()},
                               self.width, self.n_r, self.n_heads, self.num_layers)


def _layer_names(i: int) -> list[str]:
    base = f"layer{i}."
    return [base + n for n in
            ("ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
             "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


def init_params(config: ProjectorConfig, width: int, seed: int | None = None) -> ProjectorParams:
    """Seeded initialization: weights uniform +-1/sqrt(fan_in), biases zero."""
    c_h = config.hidden_width if config.hidden_width is not None else width
    if c_h != width:
        raise ValueError(f"projector: hidden width {c_h} must equal input width {width} "
                         "(the attention output is subtracted from the input)")
    if c_h % config.n_heads != 0:
        raise ValueError(f"projector: width {c_h} not divisible by n_heads {config.n_heads}")
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    dtype = ad.default_dtype()

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    arrays: dict[str, np.ndarray] = {}
    arrays["ref"] = uniform(width, (config.n_r, width))
    arrays["ref_proj.w"] = uniform(width, (width, c_h))
    arrays["ref_proj.b"] = np.zeros(c_h, dtype=dtype)
    hidden = 4 * c_h
    for i in range(config.num_layers):
        base = f"layer{i}."
        arrays[base + "ln1.g"] = np.ones(c_h, dtype=dtype)
        arrays[base + "ln1.b"] = np.zeros(c_h, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[base + name] = uniform(c_h, (c_h, c_h))
            arrays[base + "b" + name[1]] = np.zeros(c_h, dtype=dtype)
        arrays[base + "ln2.g"] = np.ones(c_h, dtype=dtype)
        arrays[base + "ln2.b"] = np.zeros(c_h, dtype=dtype)
        arrays[base + "mlp.w1"] = uniform(c_h, (c_h, hidden))
        arrays[base + "mlp.b1"] = np.zeros(hidden, dtype=dtype)
        arrays[base + "mlp.w2"] = uniform(hidden, (hidden, c_h))
        arrays[base + "mlp.b2"] = np.zeros(c_h, dtype=dtype)
    return ProjectorParams(arrays, width, config.n_r, config.n_heads, config.num_layers)


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), b)


def project(x, params: ProjectorParams, tensors: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Run the projector on (N, C) features; differentiable when ``tensors``
    are tape leaves (pass none for plain inference)."""
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.width:
        raise ValueError(f"project: expected (N, {params.width}) features, got {x.shape}")
    p = tensors if tensors is not None else {k: ad.Tensor(v) for k, v in params.arrays.items()}
    n_heads = params.n_heads
    head_dim = params.width // n_heads
    scale = 1.0 / math.sqrt(head_dim)

    # single projected reference shared by all layers
    r_h = _linear(p["ref"], p["ref_proj.w"], p["ref_proj.b"])

    out = x
    for i in range(params.num_layers):
        base = f"layer{i}."
        x1 = ad.add(ad.mul(ad.layer_norm_rows(out), p[base + "ln1.g"]), p[base + "ln1.b"])
        q = _linear(x1, p[base + "wq"], p[base + "bq"])
        k = _linear(r_h, p[base + "wk"], p[base + "bk"])
        v = _linear(r_h, p[base + "wv"], p[base + "bv"])
        heads = []
        for hh in range(n_heads):
            lo, hi = hh * head_dim, (hh + 1) * head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        attn = _linear(heads[0] if n_heads == 1 else ad.concat_cols(heads),
                       p[base + "wo"], p[base + "bo"])
        h = ad.sub(out, attn)  # subtraction merge
        x2 = ad.add(ad.mul(ad.layer_norm_rows(h), p[base + "ln2.g"]), p[base + "ln2.b"])
        mlp = _linear(ad.gelu(_linear(x2, p[base + "mlp.w1"], p[base + "mlp.b1"])),
                      p[base + "mlp.w2"], p[base + "mlp.b2"])
        out = ad.add(h, mlp)
    return out


def project_grid(grid: np.ndarray, params: ProjectorParams) -> np.ndarray:
    """Inference helper: project an (H, W, C) grid, keeping its shape."""
    h, w, c = grid.shape
    out = project(grid.reshape(h * w, c), params)
    return np.asarray(out.data).reshape(h, w, c)
