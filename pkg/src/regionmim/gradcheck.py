"""Composed finite-difference verification on a tiny model.

Checks the analytic gradients of the full masked-reconstruction loss and of
the fine-tuning cross-entropy loss against central differences for every
parameter scalar. This is the end-to-end correctness oracle for the engine
and the model wiring; the CLI exposes it as ``grad-check``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (backward, finite_diff_gradient, max_relative_error,
                       zero_grads)
from .model import (DecoderConfig, EncoderConfig, classifier_forward,
                    cross_entropy_loss, init_parameters, pretrain_loss)
from .patching import ImageGrid, MaskImage, REGION, build_masking_plan, \
    compute_valid_set, split_into_patches

TINY_ENCODER = EncoderConfig(blocks=2, latent_dim=8, heads=2, mlp_dim=16,
                             patch_size=4, channels=1, max_tokens=16)
TINY_DECODER = DecoderConfig(blocks=1, latent_dim=8, heads=2, mlp_dim=16)
TINY_IMAGE = 16
TINY_RATIO = 0.75


def tiny_sample(seed: int):
    """A 16x16 image with an organ-like blob mask, deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    pixels = rng.uniform(0.0, 1.0, (TINY_IMAGE, TINY_IMAGE, 1))
    yy, xx = np.mgrid[0:TINY_IMAGE, 0:TINY_IMAGE].astype(np.float64)
    cx, cy = rng.uniform(5.0, 11.0, 2)
    bits = ((((xx - cx) / 5.0) ** 2 + ((yy - cy) / 6.5) ** 2) <= 1.0).astype(np.uint8)
    return ImageGrid(pixels), MaskImage(bits)


def composed_gradient_errors(seed: int, step: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Returns one entry per path: "pretrain" (masked-patch reconstruction) and
    "finetune" (classifier cross entropy), each maximized over every
    parameter scalar.
    """
    img, mask = tiny_sample(seed)
    encoder, decoder, head = init_parameters(TINY_ENCODER, TINY_DECODER,
                                             classes=4, seed=seed)
    pg = split_into_patches(img, TINY_ENCODER.patch_size)
    valid = compute_valid_set(mask, TINY_ENCODER.patch_size)
    plan = build_masking_plan(pg.count, valid, TINY_RATIO, REGION, seed)

    errors: dict[str, float] = {}

    pre_params = list(encoder.named_parameters()) + list(decoder.named_parameters())
    tensors = [t for _, t in pre_params]
    zero_grads(tensors)
    backward(pretrain_loss(pg, plan, encoder, decoder))
    numeric = finite_diff_gradient(lambda: pretrain_loss(pg, plan, encoder, decoder),
                                   tensors, h=step)
    errors["pretrain"] = max(
        max_relative_error(t.grad if t.grad is not None else np.zeros_like(t.data), fd)
        for t, fd in zip(tensors, numeric))

    label = int(np.random.default_rng(seed).integers(0, 4))
    ft_params = list(encoder.named_parameters()) + list(head.named_parameters())
    tensors = [t for _, t in ft_params]

    def ft_loss():
        return cross_entropy_loss(classifier_forward(img, encoder, head), label)

    zero_grads(tensors)
    backward(ft_loss())
    numeric = finite_diff_gradient(ft_loss, tensors, h=step)
    errors["finetune"] = max(
        max_relative_error(t.grad if t.grad is not None else np.zeros_like(t.data), fd)
        for t, fd in zip(tensors, numeric))
    return errors
