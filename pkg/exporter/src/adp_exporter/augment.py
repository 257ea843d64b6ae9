"""Training-pair augmentation: color jitter -> random grayscale -> Gaussian blur.

Magnitudes are declared defaults (jitter strength 0.4 with hue 0.1,
grayscale p=0.2, blur sigma in [0.1, 2.0]); randomness comes from the global
torch generator, which the exporter seeds once per run.
"""

from __future__ import annotations

from dataclasses import dataclass

from torchvision import transforms


@dataclass
class AugmentConfig:
    jitter_strength: float = 0.4
    jitter_hue: float = 0.1
    grayscale_p: float = 0.2
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    blur_kernel: int = 23


def build_augmentation(cfg: AugmentConfig):
    s = cfg.jitter_strength
    return transforms.Compose([
        transforms.ColorJitter(brightness=s, contrast=s, saturation=s, hue=cfg.jitter_hue),
        transforms.RandomGrayscale(p=cfg.grayscale_p),
        transforms.GaussianBlur(kernel_size=cfg.blur_kernel,
                                sigma=(cfg.blur_sigma_min, cfg.blur_sigma_max)),
    ])
