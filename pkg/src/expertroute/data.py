"""Token-id conventions and batch collation shared by training and eval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
N_SPECIAL = 4


@dataclass
class Batch:
    """Padded teacher-forcing batch.

    `decoder_ids` is the right-shifted target (BOS-prefixed); `target_mask`
    is 1.0 on real target positions and 0.0 on padding.
    """

    input_ids: np.ndarray  # [B, Te] int
    enc_mask: np.ndarray  # [B, Te] float, 1.0 = real token
    decoder_ids: np.ndarray  # [B, Td] int
    target_ids: np.ndarray  # [B, Td] int
    target_mask: np.ndarray  # [B, Td] float

    @property
    def n_sequences(self) -> int:
        return self.input_ids.shape[0]


def pad_batch(pairs: list[tuple[list[int], list[int]]]) -> Batch:
    """Collate (input, target) token lists into one padded batch."""
    b = len(pairs)
    te = max(len(inp) for inp, _ in pairs)
    td = max(len(tgt) for _, tgt in pairs)
    input_ids = np.full((b, te), PAD_ID, dtype=np.int64)
    enc_mask = np.zeros((b, te))
    decoder_ids = np.full((b, td), PAD_ID, dtype=np.int64)
    target_ids = np.full((b, td), PAD_ID, dtype=np.int64)
    target_mask = np.zeros((b, td))
    for i, (inp, tgt) in enumerate(pairs):
        input_ids[i, : len(inp)] = inp
        enc_mask[i, : len(inp)] = 1.0
        decoder_ids[i, 0] = BOS_ID
        decoder_ids[i, 1 : len(tgt)] = tgt[:-1]
        target_ids[i, : len(tgt)] = tgt
        target_mask[i, : len(tgt)] = 1.0
    return Batch(input_ids, enc_mask, decoder_ids, target_ids, target_mask)
