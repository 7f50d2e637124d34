import numpy as np


def write_pgm16(image, path, vmin=None, vmax=None) -> None:
    """Binary 16-bit PGM; values are windowed to [vmin, vmax] (default: [0, max])."""
    img = np.asarray(image, dtype=float)
    lo = 0.0 if vmin is None else float(vmin)
    hi = float(img.max()) if vmax is None else float(vmax)
    if hi <= lo:
        scaled = np.zeros(img.shape)
    else:
        scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    data = np.round(scaled).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = parts[4] if len(parts) > 4 else b""
    return np.frombuffer(data[-w * h * np.dtype(dtype).itemsize :], dtype=dtype).reshape(h, w)
