"""Supervised fine-tuning on top of a pretrained checkpoint.

Pretrains briefly, then compares two transfer styles on the same split:
`linear-probe` (only the classification head moves) and `encoder-finetune`
(encoder and head move, tokenizer stays frozen).
"""

from motionprim.ingest import (
    ChannelMetadata,
    SyntheticClass,
    SyntheticSpec,
    WaveformSpec,
    generate_synthetic,
)
from motionprim.metadata import make_provider
from motionprim.model import ModelConfig, prepare_windows
from motionprim.training import (
    ENCODER_FINETUNE,
    LINEAR_PROBE,
    OptimizerConfig,
    finetune,
    pretrain,
)

SPEC = SyntheticSpec(
    classes=[
        SyntheticClass("walk", [
            WaveformSpec("sine", 1.0, 1.0, 0.0, 0.0, 0.1),
            WaveformSpec("square", 0.6, 1.0, 0.0, 0.0, 0.1),
        ]),
        SyntheticClass("run", [
            WaveformSpec("square", 1.0, 2.0, 0.0, 0.0, 0.1),
            WaveformSpec("sawtooth", 0.9, 1.0, 0.2, 0.0, 0.1),
        ]),
        SyntheticClass("shake", [
            WaveformSpec("sine", 1.0, 0.5, 0.0, 0.0, 0.1),
            WaveformSpec("square", 0.9, 2.5, 0.0, 0.0, 0.1),
        ]),
    ],
    channels=[
        ChannelMetadata("wrist", "accelerometer", "x", 50.0),
        ChannelMetadata("ankle", "gyroscope", "z", 50.0),
    ],
    windows_per_class=60,
    seed=3,
    rate=50.0,
    window_len=250,
)

CONFIG = ModelConfig(
    codebook_size=32,
    segment_len=50,
    model_dim=32,
    meta_dim=64,
    depth=2,
    heads=4,
    segments_per_channel=5,
    mask_ratio=0.25,
    num_classes=3,
)


def main() -> None:
    provider = make_provider("deterministic-hash", dim=CONFIG.meta_dim, seed=0)
    batch = prepare_windows(generate_synthetic(SPEC), CONFIG, provider, source="demo")
    pre_opt = OptimizerConfig(
        learning_rate=1e-3, weight_decay=1e-5, batch_size=60, micro_batch=60, epochs=60
    )
    model, _ = pretrain(CONFIG, [batch], pre_opt, run_seed=0)
    print("pretraining done\n")

    ft_opt = OptimizerConfig(
        learning_rate=2e-3, weight_decay=1e-5, batch_size=32, micro_batch=32, epochs=60
    )
    for policy in (LINEAR_PROBE, ENCODER_FINETUNE):
        # 30% of windows train the head(s); the held-out 70% is graded
        result = finetune(model, batch, ft_opt, policy=policy, split_fraction=0.3, run_seed=1)
        m = result.metrics
        print(f"{policy.name:17s} accuracy {m.accuracy:.3f}  macro-F1 {m.macro_f1:.3f}  "
              f"({m.num_windows} held-out windows)")
        for row in m.confusion:
            print(" " * 19 + " ".join(f"{int(v):4d}" for v in row))


if __name__ == "__main__":
    main()
