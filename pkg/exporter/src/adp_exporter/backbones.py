"""Frozen backbone registry and multi-level patch-feature extraction.

Feature layers default to depth-dependent indices: 12-layer models use
[3, 6, 9, 12], 24-layer [6, 12, 18, 24], 32-layer [8, 16, 24, 32] (1-based
transformer blocks; index k reads the k-th block's output).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

IMAGENET_MEAN, IMAGENET_STD = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

DEFAULT_LAYERS = {12: (3, 6, 9, 12), 24: (6, 12, 18, 24), 32: (8, 16, 24, 32)}

REGISTRY = {
    "dinov2-base": {"family": "dinov2", "depth": 12, "hf_id": "facebook/dinov2-base",
                    "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    "dinov2-large": {"family": "dinov2", "depth": 24, "hf_id": "facebook/dinov2-large",
                     "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    "clip-base": {"family": "clip", "depth": 12, "hf_id": "openai/clip-vit-base-patch16",
                  "mean": CLIP_MEAN, "std": CLIP_STD},
    "clip-large": {"family": "clip", "depth": 24, "hf_id": "openai/clip-vit-large-patch14",
                   "mean": CLIP_MEAN, "std": CLIP_STD},
    "imagebind": {"family": "imagebind", "depth": 32, "hf_id": None,
                  "mean": CLIP_MEAN, "std": CLIP_STD},
}


def default_layers(depth: int) -> tuple[int, ...]:
    if depth not in DEFAULT_LAYERS:
        raise ValueError(f"no default layer set for depth {depth}")
    return DEFAULT_LAYERS[depth]


@dataclass
class Backbone:
    name: str
    model: torch.nn.Module
    depth: int
    patch_size: int
    mean: tuple
    std: tuple
    extra_tokens: int  # CLS (+ register) tokens to strip from the sequence

    def extract(self, pixels: torch.Tensor, layers: tuple[int, ...]) -> list[np.ndarray]:
        """(B=1, 3, H, W) normalized pixels -> one (h, w, C) array per layer."""
        side = pixels.shape[-1] // self.patch_size
        with torch.no_grad():
            out = self.model(pixels, output_hidden_states=True)
        grids = []
        for layer in layers:
            tokens = out.hidden_states[layer]  # index 0 is the embedding output
            patches = tokens[0, self.extra_tokens:, :]
            if patches.shape[0] != side * side:
                raise ValueError(f"layer {layer}: got {patches.shape[0]} patch tokens, "
                                 f"expected {side * side}")
            grids.append(patches.reshape(side, side, -1).cpu().numpy().astype(np.float32))
        return grids


def _tiny_overrides(test_width: int | None) -> dict:
    if test_width is None:
        return {}
    return {"hidden_size": test_width, "num_attention_heads": max(2, test_width // 16),
            "intermediate_size": 2 * test_width}


def load_backbone(name: str, weights_path=None, random_init: bool = False,
                  image_size: int = 224, test_width: int | None = None) -> Backbone:
    """Build a frozen backbone.

    ``weights_path`` loads locally stored pretrained weights; ``random_init``
    constructs the architecture from its config (pipeline validation only).
    Without either the backbone is unavailable.
    """
    spec = REGISTRY.get(name)
    if spec is None:
        raise ValueError(f"unavailable backbone '{name}'; known: {', '.join(REGISTRY)}")
    family, depth = spec["family"], spec["depth"]
    if family == "imagebind":
        raise ValueError("unavailable backbone 'imagebind': no local loader is bundled; "
                         "export its features with a custom script instead")
    if weights_path is None and not random_init:
        raise ValueError(f"unavailable backbone '{name}': pass --weights PATH with a "
                         "local checkout or --random-init for pipeline validation")

    if family == "dinov2":
        from transformers import Dinov2Config, Dinov2Model
        if weights_path is not None:
            model = Dinov2Model.from_pretrained(weights_path)
            config = model.config
        else:
            config = Dinov2Config(num_hidden_layers=depth, image_size=image_size,
                                  patch_size=16, **_tiny_overrides(test_width))
            model = Dinov2Model(config)
        patch = config.patch_size
        extra = 1 + getattr(config, "num_register_tokens", 0)
    else:  # clip
        from transformers import CLIPVisionConfig, CLIPVisionModel
        if weights_path is not None:
            model = CLIPVisionModel.from_pretrained(weights_path)
            config = model.config
        else:
            config = CLIPVisionConfig(num_hidden_layers=depth, image_size=image_size,
                                      patch_size=16, **_tiny_overrides(test_width))
            model = CLIPVisionModel(config)
        patch = config.patch_size
        extra = 1

    if config.num_hidden_layers != depth:
        raise ValueError(f"backbone '{name}': loaded depth {config.num_hidden_layers} "
                         f"!= expected {depth}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return Backbone(name, model, depth, patch, spec["mean"], spec["std"], extra)
