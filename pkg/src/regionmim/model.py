"""Small ViT encoder/decoder for masked-patch reconstruction and classification.

The encoder embeds unmasked patch rows with a trainable linear projection plus
learnable per-position rows gathered at each patch's original grid index, then
runs pre-LN residual blocks (attention and MLP each inside their own residual
branch) and pools token outputs by a plain mean after a final layer norm.

The decoder projects encoder tokens to its own width, fills masked positions
with copies of a learnable mask token, restores original patch order, adds its
own positional rows, runs its (typically shallower) blocks, and maps each
token to a patch's worth of pixel values. Only the rows at masked indices are
returned; the reconstruction loss is their mean squared error against the
original masked patches.

Parameter containers are plain values: share them read-only across threads
freely, mutate them from one training loop at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapacityError, ShapeError
from .patching import ImageGrid, MaskingPlan, PatchGrid, split_into_patches


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int
    latent_dim: int
    heads: int
    mlp_dim: int
    patch_size: int
    channels: int = 1
    max_tokens: int = 196

    def __post_init__(self):
        if self.blocks < 1:
            raise ShapeError(f"encoder needs at least one block, got {self.blocks}")
        if self.latent_dim % self.heads:
            raise ShapeError(
                f"latent width {self.latent_dim} not divisible by {self.heads} heads")
        if self.max_tokens < 1:
            raise ShapeError(f"max_tokens must be positive, got {self.max_tokens}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class DecoderConfig:
    blocks: int
    latent_dim: int
    heads: int
    mlp_dim: int

    def __post_init__(self):
        if self.blocks < 1:
            raise ShapeError(f"decoder needs at least one block, got {self.blocks}")
        if self.latent_dim % self.heads:
            raise ShapeError(
                f"decoder width {self.latent_dim} not divisible by {self.heads} heads")


class BlockParams:
    """One pre-LN transformer block: attention + MLP, each behind a layer norm."""

    def __init__(self, ln1_gain, ln1_bias, q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b,
                 ln2_gain, ln2_bias, mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b):
        self.ln1_gain = ln1_gain
        self.ln1_bias = ln1_bias
        self.q_w, self.q_b = q_w, q_b
        self.k_w, self.k_b = k_w, k_b
        self.v_w, self.v_b = v_w, v_b
        self.out_w, self.out_b = out_w, out_b
        self.ln2_gain = ln2_gain
        self.ln2_bias = ln2_bias
        self.mlp_in_w, self.mlp_in_b = mlp_in_w, mlp_in_b
        self.mlp_out_w, self.mlp_out_b = mlp_out_w, mlp_out_b

    _FIELDS = ("ln1_gain", "ln1_bias", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b",
               "out_w", "out_b", "ln2_gain", "ln2_bias",
               "mlp_in_w", "mlp_in_b", "mlp_out_w", "mlp_out_b")

    def named_parameters(self, prefix: str):
        for name in self._FIELDS:
            yield f"{prefix}.{name}", getattr(self, name)


class EncoderParams:
    """All learnable arrays of the encoder."""

    def __init__(self, config: EncoderConfig, embed, positions, blocks,
                 final_ln_gain, final_ln_bias):
        self.config = config
        self.embed = embed            # [patch_dim, D]
        self.positions = positions    # [max_tokens, D], gathered by grid index
        self.blocks = blocks
        self.final_ln_gain = final_ln_gain
        self.final_ln_bias = final_ln_bias

    def named_parameters(self):
        yield "encoder.embed", self.embed
        yield "encoder.positions", self.positions
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"encoder.block{i}")
        yield "encoder.final_ln_gain", self.final_ln_gain
        yield "encoder.final_ln_bias", self.final_ln_bias


class DecoderParams:
    """All learnable arrays of the reconstruction decoder."""

    def __init__(self, config: DecoderConfig, proj, mask_token, positions, blocks,
                 final_ln_gain, final_ln_bias, pixel_w, pixel_b):
        self.config = config
        self.proj = proj              # [D, D_dec]
        self.mask_token = mask_token  # [D_dec]
        self.positions = positions    # [max_tokens, D_dec]
        self.blocks = blocks
        self.final_ln_gain = final_ln_gain
        self.final_ln_bias = final_ln_bias
        self.pixel_w = pixel_w        # [D_dec, patch_dim]
        self.pixel_b = pixel_b        # [patch_dim]

    def named_parameters(self):
        yield "decoder.proj", self.proj
        yield "decoder.mask_token", self.mask_token
        yield "decoder.positions", self.positions
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"decoder.block{i}")
        yield "decoder.final_ln_gain", self.final_ln_gain
        yield "decoder.final_ln_bias", self.final_ln_bias
        yield "decoder.pixel_w", self.pixel_w
        yield "decoder.pixel_b", self.pixel_b


class ClassifierHead:
    """Linear map from the pooled embedding to class logits."""

    def __init__(self, weight, bias, classes: int):
        self.weight = weight  # [D, K]
        self.bias = bias      # [K]
        self.classes = classes

    def named_parameters(self):
        yield "head.weight", self.weight
        yield "head.bias", self.bias


def _bounded_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    values = np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)
    return Tensor(values, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _init_block(rng, width: int, mlp_dim: int) -> BlockParams:
    return BlockParams(
        ln1_gain=_ones(width), ln1_bias=_zeros(width),
        q_w=_bounded_normal(rng, (width, width)), q_b=_zeros(width),
        k_w=_bounded_normal(rng, (width, width)), k_b=_zeros(width),
        v_w=_bounded_normal(rng, (width, width)), v_b=_zeros(width),
        out_w=_bounded_normal(rng, (width, width)), out_b=_zeros(width),
        ln2_gain=_ones(width), ln2_bias=_zeros(width),
        mlp_in_w=_bounded_normal(rng, (width, mlp_dim)), mlp_in_b=_zeros(mlp_dim),
        mlp_out_w=_bounded_normal(rng, (mlp_dim, width)), mlp_out_b=_zeros(width),
    )


def init_parameters(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
                    classes: int, seed: int):
    """Fresh parameters, deterministic in the seed.

    Weights, positional rows, and the mask token come from a normal(0, 0.02)
    clipped at two standard deviations; biases start at zero and layer-norm
    gains at one. Draw order is fixed, so identical seeds give identical
    parameters bit for bit.
    """
    rng = np.random.default_rng(seed)
    d, d_dec = encoder_cfg.latent_dim, decoder_cfg.latent_dim
    encoder = EncoderParams(
        encoder_cfg,
        embed=_bounded_normal(rng, (encoder_cfg.patch_dim, d)),
        positions=_bounded_normal(rng, (encoder_cfg.max_tokens, d)),
        blocks=[_init_block(rng, d, encoder_cfg.mlp_dim) for _ in range(encoder_cfg.blocks)],
        final_ln_gain=_ones(d),
        final_ln_bias=_zeros(d),
    )
    decoder = DecoderParams(
        decoder_cfg,
        proj=_bounded_normal(rng, (d, d_dec)),
        mask_token=_bounded_normal(rng, (d_dec,)),
        positions=_bounded_normal(rng, (encoder_cfg.max_tokens, d_dec)),
        blocks=[_init_block(rng, d_dec, decoder_cfg.mlp_dim) for _ in range(decoder_cfg.blocks)],
        final_ln_gain=_ones(d_dec),
        final_ln_bias=_zeros(d_dec),
        pixel_w=_bounded_normal(rng, (d_dec, encoder_cfg.patch_dim)),
        pixel_b=_zeros(encoder_cfg.patch_dim),
    )
    head = ClassifierHead(
        weight=_bounded_normal(rng, (d, classes)),
        bias=_zeros(classes),
        classes=int(classes),
    )
    return encoder, decoder, head


def _attention(x: Tensor, block: BlockParams, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over a [s, D] sequence."""
    s, width = x.shape
    head_dim = width // heads
    scale = 1.0 / math.sqrt(head_dim)

    def split(t):  # [s, D] -> [heads, s, head_dim]
        return t.reshape(s, heads, head_dim).transpose(1, 0, 2)

    q = split(x @ block.q_w + block.q_b)
    k = split(x @ block.k_w + block.k_b)
    v = split(x @ block.v_w + block.v_b)
    scores = ad.softmax((q @ k.transpose(0, 2, 1)) * scale, axis=-1)  # [heads, s, s]
    mixed = (scores @ v).transpose(1, 0, 2).reshape(s, width)
    return mixed @ block.out_w + block.out_b


def _mlp(x: Tensor, block: BlockParams) -> Tensor:
    return ad.gelu(x @ block.mlp_in_w + block.mlp_in_b) @ block.mlp_out_w + block.mlp_out_b


def _run_blocks(x: Tensor, blocks, heads: int) -> Tensor:
    for block in blocks:
        x = x + _attention(ad.layer_norm(x, block.ln1_gain, block.ln1_bias), block, heads)
        x = x + _mlp(ad.layer_norm(x, block.ln2_gain, block.ln2_bias), block)
    return x


def embed_unmasked(pg: PatchGrid, plan: MaskingPlan, params: EncoderParams) -> Tensor:
    """Project the unmasked patch rows and add their original-position rows."""
    cfg = params.config
    if pg.count > cfg.max_tokens:
        raise CapacityError(
            f"{pg.count} patches exceed the positional table of {cfg.max_tokens} rows")
    if plan.unmasked.size < 1:
        raise ShapeError("plan leaves no unmasked patches to embed")
    if pg.patches.shape[1] != cfg.patch_dim:
        raise ShapeError(
            f"patch width {pg.patches.shape[1]} does not match config {cfg.patch_dim}")
    visible = Tensor(pg.patches[plan.unmasked])
    return visible @ params.embed + ad.gather_rows(params.positions, plan.unmasked)


def encoder_forward(z0: Tensor, params: EncoderParams):
    """Run the residual blocks; return (final-LN token outputs [s, D], pooled [D])."""
    if z0.ndim != 2 or z0.shape[1] != params.config.latent_dim:
        raise ShapeError(
            f"encoder input {z0.shape} does not match width {params.config.latent_dim}")
    tokens = _run_blocks(z0, params.blocks, params.config.heads)
    normed = ad.layer_norm(tokens, params.final_ln_gain, params.final_ln_bias)
    return normed, normed.mean(axis=0)


def decoder_forward(tokens: Tensor, plan: MaskingPlan, params: DecoderParams) -> Tensor:
    """Reconstruct pixel rows for the masked patches, ascending masked order.

    Projected encoder tokens sit at their unmasked positions; every masked
    position holds the shared mask token. The full sequence (original patch
    order) gets the decoder's own positional rows before its blocks run.
    """
    if tokens.shape[0] != plan.unmasked.size:
        raise ShapeError(
            f"{tokens.shape[0]} encoder tokens for {plan.unmasked.size} unmasked patches")
    n = plan.unmasked.size + plan.masked.size
    projected = tokens @ params.proj                      # [u, D_dec]
    filler = ad.repeat_row(params.mask_token, plan.masked.size)
    stacked = ad.concat_rows([projected, filler])         # unmasked block, then masked

    order = np.empty(n, dtype=np.int64)
    order[plan.unmasked] = np.arange(plan.unmasked.size)
    order[plan.masked] = plan.unmasked.size + np.arange(plan.masked.size)
    sequence = ad.gather_rows(stacked, order)             # original patch order
    sequence = sequence + ad.gather_rows(params.positions, np.arange(n))

    decoded = _run_blocks(sequence, params.blocks, params.config.heads)
    decoded = ad.layer_norm(decoded, params.final_ln_gain, params.final_ln_bias)
    pixels = decoded @ params.pixel_w + params.pixel_b    # [n, patch_dim]
    return ad.gather_rows(pixels, plan.masked)


def reconstruction_loss(reconstructed: Tensor, originals) -> Tensor:
    """Mean squared error over every masked-patch pixel."""
    target = originals if isinstance(originals, Tensor) else Tensor(originals)
    if reconstructed.shape != target.shape:
        raise ShapeError(
            f"reconstruction {reconstructed.shape} vs originals {target.shape}")
    if reconstructed.shape[0] < 1:
        raise ShapeError("reconstruction loss needs at least one masked patch")
    diff = reconstructed - target
    return (diff * diff).mean()


def pretrain_loss(pg: PatchGrid, plan: MaskingPlan, encoder: EncoderParams,
                  decoder: DecoderParams) -> Tensor:
    """Composed masked-patch reconstruction loss for one sample."""
    z0 = embed_unmasked(pg, plan, encoder)
    tokens, _ = encoder_forward(z0, encoder)
    reconstructed = decoder_forward(tokens, plan, decoder)
    return reconstruction_loss(reconstructed, pg.patches[plan.masked])


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    """Cross entropy of a single [K] logit vector against one label."""
    return ad.cross_entropy(logits.reshape(1, logits.shape[0]), [int(label)])


def classifier_forward(img: ImageGrid, encoder: EncoderParams,
                       head: ClassifierHead) -> Tensor:
    """Logits for one image: embed all patches, encode, pool, linear head."""
    cfg = encoder.config
    pg = split_into_patches(img, cfg.patch_size)
    if pg.count > cfg.max_tokens:
        raise CapacityError(
            f"{pg.count} patches exceed the positional table of {cfg.max_tokens} rows")
    indices = np.arange(pg.count)
    z0 = Tensor(pg.patches) @ encoder.embed + ad.gather_rows(encoder.positions, indices)
    _, pooled = encoder_forward(z0, encoder)
    logits = pooled.reshape(1, cfg.latent_dim) @ head.weight + head.bias
    return logits.reshape(head.classes)
