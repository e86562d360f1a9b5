"""Turn raw sensor windows into discrete motion tokens.

Builds a small synthetic dataset, fits a codebook with k-means on the
normalized segments, and prints the token stream for a few windows next to
the codebook utilization numbers.
"""

import numpy as np

from motionprim.ingest import (
    ChannelMetadata,
    SyntheticClass,
    SyntheticSpec,
    WaveformSpec,
    generate_synthetic,
    normalize_matrix,
    segment_matrix,
)
from motionprim.quantizer import init_codebook, quantize_batch, usage_report

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
    ],
    channels=[
        ChannelMetadata("wrist", "accelerometer", "x", 50.0),
        ChannelMetadata("ankle", "gyroscope", "z", 50.0),
    ],
    windows_per_class=40,
    seed=0,
    rate=50.0,
    window_len=250,
)

SEGMENT_LEN = 50
CODEBOOK_SIZE = 16


def main() -> None:
    windows = generate_synthetic(SPEC)
    print(f"{len(windows)} windows, {len(SPEC.channels)} channels, {SPEC.window_len} samples each")

    # normalized segments from every window feed the k-means fit
    stacks = []
    for win in windows:
        segments, _ = segment_matrix(win, SEGMENT_LEN)
        stacks.append(normalize_matrix(segments).reshape(-1, SEGMENT_LEN))
    sample = np.concatenate(stacks)
    print(f"fitting {CODEBOOK_SIZE} prototypes on {len(sample)} segments of length {SEGMENT_LEN}")

    codebook = init_codebook(CODEBOOK_SIZE, SEGMENT_LEN, "kmeans-seeded", sample=sample, seed=0)

    for win in windows[:3]:
        segments, _ = segment_matrix(win, SEGMENT_LEN)
        norm = normalize_matrix(segments)
        print(f"\nwindow label={win.label}")
        for meta, channel_segments in zip(win.channels, norm):
            indices, _ = quantize_batch(channel_segments, codebook, record_usage=True)
            print(f"  {meta.body_part}/{meta.sensor}/{meta.axis}: tokens {indices.tolist()}")

    active, perplexity = usage_report(codebook)
    print(f"\nutilization over the sampled windows: {active}/{CODEBOOK_SIZE} active codes, "
          f"perplexity {perplexity:.2f}")


if __name__ == "__main__":
    main()
