"""Binary PPM (P6, maxval 255) image I/O.

PPM is the project's bit-exact image interchange format: floats in [0, 1]
are quantized with round(x * 255), so identical tensors always produce
identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch


def write_ppm(path: str | Path, image: torch.Tensor) -> None:
    """Write an RGB image (3, H, W), channels in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected image of shape (3, H, W), got {tuple(image.shape)}")
    arr = image.detach().cpu().numpy()
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[1], data.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path: str | Path) -> torch.Tensor:
    """Read a binary PPM into a float tensor (3, H, W) in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval; '#' comments allowed between tokens
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)
