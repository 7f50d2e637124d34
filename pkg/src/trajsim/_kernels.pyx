# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Incremental voxel traversal (exact intersection lengths) for segment rays.

forward and back share one traversal routine, so the two are exact transposes.
"""

import numpy as np

from libc.math cimport floor, sqrt, INFINITY


cdef inline double _traverse(
    double[:, :, ::1] vol,
    double ox, double oy, double oz, double vs,
    int nx, int ny, int nz,
    double sx, double sy, double sz,
    double ex, double ey, double ez,
    double value, bint adjoint,
) noexcept nogil:
    cdef double dx = ex - sx, dy = ey - sy, dz = ez - sz
    cdef double length = sqrt(dx * dx + dy * dy + dz * dz)
    if length == 0.0:
        return 0.0
    cdef double tmin = 0.0, tmax = 1.0
    cdef double lo, hi, a, b, tmp
    cdef double bmin[3]
    cdef double bmax[3]
    cdef double p0[3]
    cdef double d[3]
    cdef int n[3]
    cdef int k
    bmin[0] = ox; bmin[1] = oy; bmin[2] = oz
    bmax[0] = ox + nx * vs; bmax[1] = oy + ny * vs; bmax[2] = oz + nz * vs
    p0[0] = sx; p0[1] = sy; p0[2] = sz
    d[0] = dx; d[1] = dy; d[2] = dz
    n[0] = nx; n[1] = ny; n[2] = nz

    for k in range(3):
        if d[k] == 0.0:
            if p0[k] < bmin[k] or p0[k] > bmax[k]:
                return 0.0
        else:
            a = (bmin[k] - p0[k]) / d[k]
            b = (bmax[k] - p0[k]) / d[k]
            if a > b:
                tmp = a; a = b; b = tmp
            if a > tmin:
                tmin = a
            if b < tmax:
                tmax = b
    if tmin >= tmax:
        return 0.0

    cdef int idx[3]
    cdef int step[3]
    cdef double tnext[3]
    cdef double tdelta[3]
    cdef double pos
    for k in range(3):
        # index of the first voxel: locate the entry point nudged along the ray
        pos = p0[k] + tmin * d[k]
        idx[k] = <int>floor((pos - bmin[k]) / vs)
        if d[k] > 0.0:
            step[k] = 1
        elif d[k] < 0.0:
            step[k] = -1
            if pos - bmin[k] == idx[k] * vs:
                idx[k] -= 1
        else:
            step[k] = 0
        if idx[k] < 0:
            idx[k] = 0
        if idx[k] > n[k] - 1:
            idx[k] = n[k] - 1
        if step[k] == 0:
            tnext[k] = INFINITY
            tdelta[k] = INFINITY
        else:
            tnext[k] = (bmin[k] + (idx[k] + (1 if step[k] > 0 else 0)) * vs - p0[k]) / d[k]
            tdelta[k] = vs / (d[k] if d[k] > 0.0 else -d[k])

    cdef double t = tmin
    cdef double tn, seg
    cdef double acc = 0.0
    cdef int axis
    while True:
        axis = 0
        if tnext[1] < tnext[axis]:
            axis = 1
        if tnext[2] < tnext[axis]:
            axis = 2
        tn = tnext[axis]
        if tn > tmax:
            tn = tmax
        seg = (tn - t) * length
        if seg > 0.0:
            if adjoint:
                vol[idx[0], idx[1], idx[2]] += value * seg
            else:
                acc += vol[idx[0], idx[1], idx[2]] * seg
        t = tn
        if t >= tmax:
            break
        idx[axis] += step[axis]
        if idx[axis] < 0 or idx[axis] >= n[axis]:
            break
        tnext[axis] += tdelta[axis]
    return acc


def forward(double[:, :, ::1] vol, origin, double vs, double[:, ::1] starts, double[:, ::1] ends):
    """Line integrals of ``vol`` along segments ``starts[i] -> ends[i]``."""
    cdef Py_ssize_t m = starts.shape[0], i
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef int nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    out = np.zeros(m)
    cdef double[::1] o = out
    with nogil:
        for i in range(m):
            o[i] = _traverse(vol, ox, oy, oz, vs, nx, ny, nz,
                             starts[i, 0], starts[i, 1], starts[i, 2],
                             ends[i, 0], ends[i, 1], ends[i, 2], 0.0, False)
    return out


def back(double[::1] values, shape, origin, double vs, double[:, ::1] starts, double[:, ::1] ends):
    """Adjoint of forward: accumulate ``values[i] * length`` in ray order."""
    cdef Py_ssize_t m = starts.shape[0], i
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    out = np.zeros(tuple(shape))
    cdef double[:, :, ::1] vol = out
    cdef int nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    with nogil:
        for i in range(m):
            if values[i] != 0.0:
                _traverse(vol, ox, oy, oz, vs, nx, ny, nz,
                          starts[i, 0], starts[i, 1], starts[i, 2],
                          ends[i, 0], ends[i, 1], ends[i, 2], values[i], True)
    return out
