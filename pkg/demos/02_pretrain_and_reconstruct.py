"""Pretrain a tiny model briefly and render its masked-patch reconstructions.

Shows the full self-supervised loop end to end: corpus generation, masked
reconstruction pretraining, then a qualitative before/after rendering where
masked patches are replaced by the decoder's predictions.
"""

from pathlib import Path

import numpy as np

from regionmim import (DecoderConfig, EncoderConfig, RunConfig, SyntheticSpec,
                       build_masking_plan, compute_valid_set, decoder_forward,
                       embed_unmasked, encoder_forward, generate_synthetic,
                       load_manifest, load_split, no_grad, pretrain,
                       reassemble_image, split_into_patches, write_pgm)

OUT = Path(__file__).parent / "out" / "reconstruct"
PATCH = 4


def to_u8(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = generate_synthetic(SyntheticSpec(image_size=32, per_class=20, seed=5),
                                  OUT / "corpus")
    train = load_split(load_manifest(manifest), "train", 32, 32)
    samples = [(img, mask) for img, mask, _ in train]

    encoder_cfg = EncoderConfig(blocks=2, latent_dim=32, heads=4, mlp_dim=64,
                                patch_size=PATCH, channels=1, max_tokens=64)
    decoder_cfg = DecoderConfig(blocks=1, latent_dim=32, heads=4, mlp_dim=64)
    run = RunConfig(epochs=20, batch_size=16, base_lr=0.048, weight_decay=0.05,
                    mask_ratio=0.25, mask_strategy="region",
                    schedule="cosine", warmup_epochs=2, seed=0)
    print(f"pretraining on {len(samples)} images for {run.epochs} epochs ...")
    encoder, decoder, metrics = pretrain(samples, encoder_cfg, decoder_cfg, run,
                                         log=print)
    print(f"loss {metrics.losses()[0]:.4f} -> {metrics.final_loss():.4f}")

    img, mask = samples[0]
    pg = split_into_patches(img, PATCH)
    plan = build_masking_plan(pg.count, compute_valid_set(mask, PATCH),
                              run.mask_ratio, run.mask_strategy, seed=123)
    with no_grad():
        tokens, _ = encoder_forward(embed_unmasked(pg, plan, encoder), encoder)
        predicted = decoder_forward(tokens, plan, decoder)

    gray = np.full(pg.patches.shape[1], 0.5)
    masked_view = reassemble_image(pg, {int(i): gray for i in plan.masked})
    filled = reassemble_image(
        pg, {int(i): predicted.data[k] for k, i in enumerate(plan.masked)})

    write_pgm(OUT / "original.pgm", to_u8(img.pixels[:, :, 0]))
    write_pgm(OUT / "masked.pgm", to_u8(masked_view.pixels[:, :, 0]))
    write_pgm(OUT / "reconstructed.pgm", to_u8(filled.pixels[:, :, 0]))
    print(f"renderings written to {OUT}")


if __name__ == "__main__":
    main()
