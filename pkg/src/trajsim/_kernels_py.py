"""Numpy fallback for the voxel traversal kernels.

Sort-based Siddon: all plane crossings of a ray are computed at once, sorted,
and consecutive pairs give the per-voxel intersection lengths. Same contract
as the compiled module, different algorithm.
"""

import numpy as np

_CHUNK = 2048


def _segments(shape, origin, vs, starts, ends):
    """Flat voxel indices and lengths for a chunk of rays; row r of each output is ray r."""
    shape = np.asarray(shape)
    bmin = np.asarray(origin, dtype=float)
    bmax = bmin + shape * vs
    d = ends - starts
    length = np.linalg.norm(d, axis=1)
    m = starts.shape[0]

    tmin = np.zeros(m)
    tmax = np.ones(m)
    alphas = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            dk = d[:, k]
            para = dk == 0.0
            a = (bmin[k] - starts[:, k]) / dk
            b = (bmax[k] - starts[:, k]) / dk
            lo = np.where(para, np.where((starts[:, k] < bmin[k]) | (starts[:, k] > bmax[k]), np.inf, -np.inf), np.minimum(a, b))
            hi = np.where(para, np.where((starts[:, k] < bmin[k]) | (starts[:, k] > bmax[k]), -np.inf, np.inf), np.maximum(a, b))
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
            planes = bmin[k] + vs * np.arange(shape[k] + 1)
            t = (planes[None, :] - starts[:, k : k + 1]) / dk[:, None]
            t[para] = np.nan
            alphas.append(t)
    valid = tmin < tmax
    # rays that miss collapse to an empty interval so no infinities reach the arithmetic
    tmin = np.where(valid, tmin, 0.0)
    tmax = np.where(valid, tmax, 0.0)
    t = np.concatenate([tmin[:, None], tmax[:, None], *alphas], axis=1)
    t = np.where(np.isnan(t), tmin[:, None], t)
    t = np.clip(t, tmin[:, None], tmax[:, None])
    t.sort(axis=1)
    seg = np.diff(t, axis=1) * length[:, None]
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    flat = np.zeros(mid.shape, dtype=np.int64)
    for k in range(3):
        pos = starts[:, k : k + 1] + mid * d[:, k : k + 1]
        ik = np.clip(np.floor((pos - bmin[k]) / vs).astype(np.int64), 0, shape[k] - 1)
        flat = flat * shape[k] + ik
    seg = np.where(valid[:, None] & (seg > 0), seg, 0.0)
    return flat, seg


def forward(vol, origin, vs, starts, ends):
    vol = np.ascontiguousarray(vol, dtype=float)
    flatvol = vol.ravel()
    out = np.zeros(starts.shape[0])
    for s in range(0, starts.shape[0], _CHUNK):
        flat, seg = _segments(vol.shape, origin, vs, starts[s : s + _CHUNK], ends[s : s + _CHUNK])
        out[s : s + _CHUNK] = (flatvol[flat] * seg).sum(axis=1)
    return out


def back(values, shape, origin, vs, starts, ends):
    size = int(np.prod(shape))
    acc = np.zeros(size)
    for s in range(0, starts.shape[0], _CHUNK):
        flat, seg = _segments(shape, origin, vs, starts[s : s + _CHUNK], ends[s : s + _CHUNK])
        w = seg * values[s : s + _CHUNK, None]
        acc += np.bincount(flat.ravel(), weights=w.ravel(), minlength=size)
    return acc.reshape(tuple(shape))
