"""Transformer input construction: token tables, statistical and metadata
embedding composition, channel-shared positions, and the mask plan.

Index conventions, all 0-based:
  rows 0..K-1 of the embedding table are the codebook entries,
  row K is [MASK], row K+1 is [START], row K+2 is [END];
  [CLS] is a separate vector with no table row (sentinel index -1).
Position slots: a motion token at time t uses slot t; the last three rows of
the position table are reserved for CLS, START, END (shared by channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ingest import ChannelMetadata, SensorWindow, segment_matrix, normalize_matrix
from .quantizer import Codebook, quantize_batch

KIND_CLS = 0
KIND_START = 1
KIND_MOTION = 2
KIND_END = 3

CLS_SENTINEL = -1

INIT_STD = 0.02


def mask_row(K: int) -> int:
    return K


def start_row(K: int) -> int:
    return K + 1


def end_row(K: int) -> int:
    return K + 2


# ---------------------------------------------------------------------------
# Parameter tables


@dataclass
class EmbeddingTable:
    """(K+3) x D token embeddings plus the separate CLS vector."""

    rows: np.ndarray
    cls_vector: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.cls_vector = np.asarray(self.cls_vector, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 5:
            raise DataError("embedding table must be (K+3, D) with K >= 2")
        if self.cls_vector.shape != (self.rows.shape[1],):
            raise DataError("cls vector must be length D")
        if not (np.all(np.isfinite(self.rows)) and np.all(np.isfinite(self.cls_vector))):
            raise DataError("embedding table must be finite")

    @property
    def num_codes(self) -> int:
        return self.rows.shape[0] - 3

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class StatProjector:
    """Affine map from (mean, variance) pairs into model space."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] != 2:
            raise DataError("stat projector weight must be (D, 2)")
        if self.bias.shape != (self.weight.shape[0],):
            raise DataError("stat projector bias must be length D")


@dataclass
class PositionTable:
    """(P_max, D) trainable positions; the top three rows are reserved."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 4:
            raise DataError("position table must be (P_max >= 4, D)")

    @property
    def max_slots(self) -> int:
        return self.rows.shape[0]

    @property
    def cls_slot(self) -> int:
        return self.rows.shape[0] - 1

    @property
    def start_slot(self) -> int:
        return self.rows.shape[0] - 2

    @property
    def end_slot(self) -> int:
        return self.rows.shape[0] - 3


def init_embedding_table(K: int, model_dim: int, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    return EmbeddingTable(
        rng.normal(0.0, INIT_STD, size=(K + 3, model_dim)),
        rng.normal(0.0, INIT_STD, size=model_dim),
    )


def init_stat_projector(model_dim: int, seed: int = 0) -> StatProjector:
    rng = np.random.default_rng(seed)
    return StatProjector(rng.normal(0.0, INIT_STD, size=(model_dim, 2)), np.zeros(model_dim))


def init_position_table(segments_per_channel: int, model_dim: int, seed: int = 0) -> PositionTable:
    rng = np.random.default_rng(seed)
    return PositionTable(rng.normal(0.0, INIT_STD, size=(segments_per_channel + 3, model_dim)))


# ---------------------------------------------------------------------------
# Tokenization


@dataclass
class TokenSequence:
    """Quantized view of one window before embedding: per-channel VQ indices
    and raw-segment stats, in channel-major order."""

    vq_indices: np.ndarray  # (C, S) int
    stats: np.ndarray  # (C, S, 2) raw mean/variance
    channels: list[ChannelMetadata]
    label: int | None = None

    def __post_init__(self) -> None:
        self.vq_indices = np.asarray(self.vq_indices, dtype=np.int64)
        self.stats = np.asarray(self.stats, dtype=np.float64)
        if self.vq_indices.ndim != 2:
            raise DataError("vq_indices must be (C, S)")
        if self.stats.shape != self.vq_indices.shape + (2,):
            raise DataError("stats must be (C, S, 2) aligned with vq_indices")
        if len(self.channels) != self.vq_indices.shape[0]:
            raise DataError("one ChannelMetadata per channel required")

    @property
    def num_channels(self) -> int:
        return self.vq_indices.shape[0]

    @property
    def segments_per_channel(self) -> int:
        return self.vq_indices.shape[1]


def tokenize_window(
    win: SensorWindow,
    codebook: Codebook,
    seg_len: int,
    record_usage: bool = False,
) -> TokenSequence:
    """Segment, normalize, and quantize one window into motion tokens.
    Stats are taken from the raw segments; quantization sees normalized ones."""
    values, stats = segment_matrix(win, seg_len)
    C, S, L = values.shape
    if S < 1:
        raise DataError(f"window of {win.window_len} samples yields no length-{seg_len} segments")
    normalized = normalize_matrix(values)
    indices, _ = quantize_batch(normalized.reshape(C * S, L), codebook, record_usage=record_usage)
    return TokenSequence(indices.reshape(C, S), stats, list(win.channels), label=win.label)


# ---------------------------------------------------------------------------
# Sequence layout


@dataclass
class SequenceLayout:
    """Structural description shared by every window with the same channel
    count and segment count: token kinds, owning channel, time index, and
    position slot for each of the Seq = 1 + C*(S+2) positions."""

    kinds: np.ndarray
    channel_of: np.ndarray
    time_of: np.ndarray
    position_slot: np.ndarray
    num_channels: int
    segments_per_channel: int

    @property
    def seq_len(self) -> int:
        return self.kinds.shape[0]

    @property
    def motion_mask(self) -> np.ndarray:
        return self.kinds == KIND_MOTION


def build_layout(num_channels: int, segments_per_channel: int, position_table: PositionTable) -> SequenceLayout:
    """Layout [CLS] then per channel [START] t_0 .. t_{S-1} [END]."""
    if num_channels < 1:
        raise DataError("layout needs at least one channel")
    if segments_per_channel < 0:
        raise DataError("segments_per_channel must be >= 0")
    S = segments_per_channel
    if position_table.max_slots < S + 3:
        raise ConfigError(
            f"position table has {position_table.max_slots} slots; needs {S} motion slots + 3 reserved"
        )
    seq_len = 1 + num_channels * (S + 2)
    kinds = np.empty(seq_len, dtype=np.int8)
    channel_of = np.full(seq_len, -1, dtype=np.int64)
    time_of = np.full(seq_len, -1, dtype=np.int64)
    slots = np.empty(seq_len, dtype=np.int64)
    kinds[0] = KIND_CLS
    slots[0] = position_table.cls_slot
    pos = 1
    for c in range(num_channels):
        kinds[pos] = KIND_START
        channel_of[pos] = c
        slots[pos] = position_table.start_slot
        pos += 1
        for t in range(S):
            kinds[pos] = KIND_MOTION
            channel_of[pos] = c
            time_of[pos] = t
            slots[pos] = t
            pos += 1
        kinds[pos] = KIND_END
        channel_of[pos] = c
        slots[pos] = position_table.end_slot
        pos += 1
    return SequenceLayout(kinds, channel_of, time_of, slots, num_channels, S)


def layout_embed_rows(tokens: TokenSequence, layout: SequenceLayout, K: int) -> np.ndarray:
    """Per-position embedding-table rows for one window: CLS sentinel, then
    START / vq indices / END per channel."""
    if tokens.num_channels != layout.num_channels or tokens.segments_per_channel != layout.segments_per_channel:
        raise DataError("token sequence does not fit layout")
    if np.any((tokens.vq_indices < 0) | (tokens.vq_indices >= K)):
        raise DataError("vq index out of range for codebook size")
    rows = np.empty(layout.seq_len, dtype=np.int64)
    rows[layout.kinds == KIND_CLS] = CLS_SENTINEL
    rows[layout.kinds == KIND_START] = start_row(K)
    rows[layout.kinds == KIND_END] = end_row(K)
    rows[layout.motion_mask] = tokens.vq_indices.reshape(-1)
    return rows


def layout_stats(tokens: TokenSequence, layout: SequenceLayout) -> np.ndarray:
    """(Seq, 2) raw stats aligned to the layout; zeros at special tokens."""
    stats = np.zeros((layout.seq_len, 2), dtype=np.float64)
    stats[layout.motion_mask] = tokens.stats.reshape(-1, 2)
    return stats


# ---------------------------------------------------------------------------
# Single-token reference operations


def embed_index(idx: int, table: EmbeddingTable) -> np.ndarray:
    """Row lookup; gradient of a downstream loss lands on that row alone."""
    if not (0 <= idx < table.rows.shape[0]):
        raise DataError(f"token index {idx} outside table of {table.rows.shape[0]} rows")
    return table.rows[idx].copy()


def embed_stats(stats: np.ndarray, proj: StatProjector) -> np.ndarray:
    """W_stat f + b_stat for f = (mean, variance)."""
    f = np.asarray(stats, dtype=np.float64)
    if f.shape != (2,):
        raise DataError("stats must be a (mean, variance) pair")
    if not np.all(np.isfinite(f)):
        raise DataError("stats must be finite")
    return proj.weight @ f + proj.bias


def compose_token(e_vq: np.ndarray, e_stat: np.ndarray, e_meta: np.ndarray) -> np.ndarray:
    """Elementwise sum of the three constituent embeddings."""
    if not (e_vq.shape == e_stat.shape == e_meta.shape):
        raise DataError("constituent embeddings must share length D")
    return e_vq + e_stat + e_meta


# ---------------------------------------------------------------------------
# Assembly


@dataclass
class ComposedSequence:
    """One window as a (Seq, D) matrix plus per-position bookkeeping."""

    vectors: np.ndarray
    layout: SequenceLayout
    embed_rows: np.ndarray
    positions_added: bool = False


def assemble(
    tokens: TokenSequence,
    table: EmbeddingTable,
    stat_proj: StatProjector,
    meta_projected: np.ndarray,
    mask_positions: np.ndarray | None = None,
    position_table: PositionTable | None = None,
    layout: SequenceLayout | None = None,
) -> ComposedSequence:
    """Compose one window's full token matrix (before positions).

    meta_projected is the (C, D) matrix of adapter outputs, one row per
    channel; START, END, and motion tokens all add their channel's row, CLS
    adds nothing. Special tokens contribute no statistical embedding (the
    affine map is skipped entirely, bias included). `mask_positions`, if
    given, replaces those motion tokens' table rows with the MASK row.
    """
    K = table.num_codes
    if layout is None:
        if position_table is None:
            position_table = PositionTable(np.zeros((tokens.segments_per_channel + 3, table.dim)))
        layout = build_layout(tokens.num_channels, tokens.segments_per_channel, position_table)
    if meta_projected.shape != (tokens.num_channels, table.dim):
        raise DataError("meta_projected must be (C, D)")
    rows = layout_embed_rows(tokens, layout, K)
    if mask_positions is not None:
        mask_positions = np.asarray(mask_positions, dtype=np.int64)
        if np.any(~layout.motion_mask[mask_positions]):
            raise DataError("mask plan touches a special token")
        rows[mask_positions] = mask_row(K)
    vectors = np.empty((layout.seq_len, table.dim), dtype=np.float64)
    vectors[0] = table.cls_vector
    vectors[1:] = table.rows[rows[1:]]
    stats = layout_stats(tokens, layout)
    motion = layout.motion_mask
    vectors[motion] += stats[motion] @ stat_proj.weight.T + stat_proj.bias
    has_channel = layout.channel_of >= 0
    vectors[has_channel] += meta_projected[layout.channel_of[has_channel]]
    return ComposedSequence(vectors, layout, rows)


def add_positions(seq: ComposedSequence, position_table: PositionTable) -> ComposedSequence:
    """X_hat = X + P[slot]; sharing one slot per time step across channels."""
    if seq.positions_added:
        raise DataError("positions already added to this sequence")
    if seq.layout.position_slot.max() >= position_table.max_slots:
        raise ConfigError("position slot outside table")
    vectors = seq.vectors + position_table.rows[seq.layout.position_slot]
    return ComposedSequence(vectors, seq.layout, seq.embed_rows, positions_added=True)


# ---------------------------------------------------------------------------
# Masking


@dataclass
class MaskPlan:
    positions: np.ndarray  # sorted sequence positions replaced by [MASK]
    targets: np.ndarray  # original vq indices at those positions
    masked_rows: np.ndarray  # full embed-row vector with MASK substituted


def mask_count(num_motion: int, ratio: float) -> int:
    """Round-half-up of ratio * count, floored at 1 whenever ratio > 0."""
    if not (0 <= ratio < 1):
        raise ConfigError("mask ratio must be in [0, 1)")
    if ratio == 0 or num_motion == 0:
        return 0
    return max(1, int(np.floor(ratio * num_motion + 0.5)))


def plan_mask(
    embed_rows: np.ndarray,
    K: int,
    ratio: float,
    seed: int | np.random.Generator,
) -> MaskPlan:
    """Choose |M| = round(ratio * motion count) motion positions uniformly
    without replacement, deterministically per seed. Specials and CLS are
    never candidates; targets keep the pre-mask indices."""
    rows = np.asarray(embed_rows, dtype=np.int64).copy()
    motion_positions = np.flatnonzero((rows >= 0) & (rows < K))
    m = mask_count(motion_positions.size, ratio)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if m == 0:
        picks = np.empty(0, dtype=np.int64)
    else:
        picks = np.sort(rng.choice(motion_positions, size=m, replace=False))
    targets = rows[picks].copy()
    rows[picks] = mask_row(K)
    return MaskPlan(picks, targets, rows)
