"""Label-efficiency comparison: pretrained encoder vs training from scratch.

Pretrains once with region-guided masking, then fine-tunes both that encoder
and a randomly initialized one on a small stratified label fraction, and
reports test accuracy for each arm.
"""

from pathlib import Path

from regionmim import (DecoderConfig, EncoderConfig, RunConfig, SyntheticSpec,
                       evaluate, finetune, generate_synthetic, init_parameters,
                       load_manifest, load_split, pretrain)

OUT = Path(__file__).parent / "out" / "label-efficiency"
FRACTION = 0.10


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = generate_synthetic(SyntheticSpec(image_size=32, per_class=60, seed=6),
                                  OUT / "corpus")
    loaded = load_manifest(manifest)
    train = load_split(loaded, "train", 32, 32)
    test = load_split(loaded, "test", 32, 32)
    unlabeled = [(img, mask) for img, mask, _ in train]
    labeled = [(img, label) for img, _, label in train]
    held_out = [(img, label) for img, _, label in test]

    encoder_cfg = EncoderConfig(blocks=2, latent_dim=32, heads=4, mlp_dim=64,
                                patch_size=4, channels=1, max_tokens=64)
    decoder_cfg = DecoderConfig(blocks=1, latent_dim=32, heads=4, mlp_dim=64)

    pre = RunConfig(epochs=30, batch_size=16, base_lr=0.048, weight_decay=0.05,
                    mask_ratio=0.25, mask_strategy="region",
                    schedule="cosine", warmup_epochs=3, seed=0)
    print(f"pretraining on {len(unlabeled)} unlabeled images ...")
    pretrained, _, metrics = pretrain(unlabeled, encoder_cfg, decoder_cfg, pre)
    print(f"reconstruction loss {metrics.losses()[0]:.4f} -> {metrics.final_loss():.4f}")

    scratch, _, _ = init_parameters(encoder_cfg, decoder_cfg, loaded.classes, seed=0)
    tune = RunConfig(epochs=30, batch_size=16, base_lr=0.032,
                     weight_decay=0.05, seed=0)
    print(f"fine-tuning both arms on a {FRACTION:.0%} stratified label fraction ...")
    for name, encoder in (("pretrained", pretrained), ("from scratch", scratch)):
        encoder, head, _ = finetune(labeled, encoder, tune, loaded.classes,
                                    label_fraction=FRACTION)
        accuracy, confusion = evaluate(held_out, encoder, head)
        print(f"{name:>13}: test accuracy {accuracy:.3f}")
        print(confusion)


if __name__ == "__main__":
    main()
