"""Run-length encoding of binary masks (COCO interchange conventions).

Counts are runs over the column-major (Fortran-order) flattened mask,
starting with the number of zeros. Both the uncompressed list form and the
compressed ASCII string form are supported.
"""

import numpy as np

from mcsam.exceptions import ShapeError


def encode_rle(mask: np.ndarray) -> dict:
    """Binary (H, W) mask -> {"size": [H, W], "counts": [int, ...]}."""
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2D mask, got shape {mask.shape}")
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts = []
    run_value = False
    run_length = 0
    for v in flat:
        if v == run_value:
            run_length += 1
        else:
            counts.append(run_length)
            run_value = v
            run_length = 1
    counts.append(run_length)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def decode_rle(rle: dict) -> np.ndarray:
    """Decode uncompressed (list counts) or compressed (string counts) RLE."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts)
    total = sum(counts)
    if total != h * w:
        raise ShapeError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def counts_to_string(counts) -> str:
    """Compress counts with the COCO variable-length delta encoding."""
    out = []
    for i, count in enumerate(counts):
        x = int(count)
        if i > 2:
            x -= int(counts[i - 2])
        while True:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
            if not more:
                break
    return "".join(out)


def string_to_counts(s) -> list:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts = []
    pos = 0
    while pos < len(s):
        x = 0
        k = 0
        while True:
            c = ord(s[pos]) - 48
            x |= (c & 0x1F) << (5 * k)
            pos += 1
            k += 1
            if not (c & 0x20):
                if c & 0x10:
                    x |= -1 << (5 * k)
                break
        if len(counts) > 2:
            x += counts[len(counts) - 2]
        counts.append(x)
    return counts


def mask_area(rle: dict) -> int:
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts)
    return int(sum(counts[1::2]))
