"""Analytic attenuating scenes with closed-form line integrals.

Overlapping primitives add their attenuation, which keeps every projection
linear in the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

KINDS = ("sphere", "box", "capped-cylinder")

MU_SOFT = 0.02
MU_BEAM = 0.04
MU_METAL = 0.3

#: uniform sampling bounds for build_chest_phantom, all in mm
CHEST_BOUNDS = {
    "gel_radius": (22.0, 28.0),
    "gel_offset_x": (26.0, 32.0),
    "gel_offset_y": (-4.0, 4.0),
    "gel_half_length": (35.0, 45.0),
    "beam_center_y": (-34.0, -28.0),
    "beam_half_x": (16.0, 20.0),
    "beam_half_y": (10.0, 14.0),
    "beam_half_z": (35.0, 45.0),
    "screw_offset_x": (10.0, 14.0),
    "screw_radius": (2.0, 3.0),
    "screw_half_length": (10.0, 14.0),
    "screw_convergence_deg": (0.0, 12.0),
    "screw_inclination_deg": (6.0, 15.0),  # magnitude; the sign is drawn separately
}
TASK_RADIUS_MM = 4.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str
    center_mm: tuple
    mu_per_mm: float
    radius_mm: float = 0.0
    half_widths_mm: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    half_length_mm: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PhantomError(f"unknown primitive kind {self.kind!r}")
        if self.mu_per_mm < 0:
            raise PhantomError("mu_per_mm must be non-negative")
        if self.kind == "sphere" and self.radius_mm <= 0:
            raise PhantomError("sphere radius must be positive")
        if self.kind == "box" and min(self.half_widths_mm) <= 0:
            raise PhantomError("box half-widths must be positive")
        if self.kind == "capped-cylinder":
            if self.radius_mm <= 0 or self.half_length_mm <= 0:
                raise PhantomError("cylinder radius and half-length must be positive")
            if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
                raise PhantomError("cylinder axis must be unit length")

    def translated(self, offset) -> "Primitive":
        return replace(self, center_mm=tuple(float(c + o) for c, o in zip(self.center_mm, offset)))

    def scaled_mu(self, factor: float) -> "Primitive":
        return replace(self, mu_per_mm=self.mu_per_mm * factor)


def sphere(center, radius, mu) -> Primitive:
    return Primitive("sphere", tuple(map(float, center)), float(mu), radius_mm=float(radius))


def box(center, half_widths, mu) -> Primitive:
    return Primitive("box", tuple(map(float, center)), float(mu), half_widths_mm=tuple(map(float, half_widths)))


def cylinder(center, axis, radius, half_length, mu) -> Primitive:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    return Primitive(
        "capped-cylinder",
        tuple(map(float, center)),
        float(mu),
        radius_mm=float(radius),
        axis=tuple(a.tolist()),
        half_length_mm=float(half_length),
    )


@dataclass(frozen=True)
class TaskRegion:
    center_mm: tuple
    radius_mm: float = TASK_RADIUS_MM

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise PhantomError("task radius must be positive")


@dataclass(frozen=True)
class Phantom:
    primitives: tuple
    metal_indices: tuple = ()
    rng_seed: int = 0
    task: TaskRegion | None = field(default=None, compare=True)

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise PhantomError("phantom needs at least one primitive")
        for i in self.metal_indices:
            if not 0 <= i < len(self.primitives):
                raise PhantomError(f"metal index {i} out of range")

    @property
    def metal(self) -> list[Primitive]:
        return [self.primitives[i] for i in self.metal_indices]

    def translated(self, offset) -> "Phantom":
        task = self.task
        if task is not None:
            task = TaskRegion(tuple(float(c + o) for c, o in zip(task.center_mm, offset)), task.radius_mm)
        return replace(self, primitives=tuple(p.translated(offset) for p in self.primitives), task=task)

    def without_metal(self) -> "Phantom":
        keep = [p for i, p in enumerate(self.primitives) if i not in self.metal_indices]
        return replace(self, primitives=tuple(keep), metal_indices=())


# ---------------------------------------------------------------------------
# chord lengths


def _interval_ray(origins, dirs, prim: Primitive):
    """Parametric entry/exit (t0, t1) of lines through `prim`; empty where t1 <= t0."""
    c = np.asarray(prim.center_mm)
    oc = origins - c
    n = origins.shape[0]
    if prim.kind == "sphere":
        b = np.einsum("ij,ij->i", oc, dirs)
        cc = np.einsum("ij,ij->i", oc, oc) - prim.radius_mm**2
        disc = b * b - cc
        s = np.sqrt(np.maximum(disc, 0.0))
        t0 = np.where(disc > 0, -b - s, 0.0)
        t1 = np.where(disc > 0, -b + s, 0.0)
        return t0, t1
    if prim.kind == "box":
        t0 = np.full(n, -np.inf)
        t1 = np.full(n, np.inf)
        for k in range(3):
            h = prim.half_widths_mm[k]
            d = dirs[:, k]
            o = oc[:, k]
            para = d == 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-h - o) / d
                tb = (h - o) / d
            lo = np.where(para, np.where(np.abs(o) <= h, -np.inf, np.inf), np.minimum(ta, tb))
            hi = np.where(para, np.where(np.abs(o) <= h, np.inf, -np.inf), np.maximum(ta, tb))
            t0 = np.maximum(t0, lo)
            t1 = np.minimum(t1, hi)
        return t0, t1
    # capped cylinder: radial quadratic intersected with the axial slab
    a = np.asarray(prim.axis)
    s0 = oc @ a
    ds = dirs @ a
    h = prim.half_length_mm
    para = ds == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (-h - s0) / ds
        tb = (h - s0) / ds
    inside = np.abs(s0) <= h
    lo = np.where(para, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(para, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))

    op = oc - s0[:, None] * a
    dp = dirs - ds[:, None] * a
    qa = np.einsum("ij,ij->i", dp, dp)
    qb = np.einsum("ij,ij->i", op, dp)
    qc = np.einsum("ij,ij->i", op, op) - prim.radius_mm**2
    along = qa < 1e-14
    disc = qb * qb - qa * qc
    s = np.sqrt(np.maximum(disc, 0.0))
    ok = (disc > 0) & ~along
    safe = np.where(along, 1.0, qa)
    r0 = np.where(ok, (-qb - s) / safe, 0.0)
    r1 = np.where(ok, (-qb + s) / safe, 0.0)
    r0 = np.where(along, np.where(qc <= 0, -np.inf, 0.0), r0)
    r1 = np.where(along, np.where(qc <= 0, np.inf, 0.0), r1)
    return np.maximum(lo, r0), np.minimum(hi, r1)


def chord_lengths(prim: Primitive, origins, dirs) -> np.ndarray:
    """Length of each ray ``origin + t*dir, t >= 0`` inside the primitive."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    t0, t1 = _interval_ray(origins, dirs, prim)
    t0 = np.maximum(t0, 0.0)
    return np.maximum(t1 - t0, 0.0)


def line_integrals(phantom: Phantom, origins, dirs) -> np.ndarray:
    """Vectorized path attenuation for many rays (unit directions)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    total = np.zeros(origins.shape[0])
    for prim in phantom.primitives:
        if prim.mu_per_mm != 0.0:
            total += prim.mu_per_mm * chord_lengths(prim, origins, dirs)
    return total


def line_integral(phantom: Phantom, origin, direction) -> float:
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise PhantomError("ray direction must be unit length")
    return float(line_integrals(phantom, origin, d)[0])


def metal_path_length(phantom: Phantom, origins, dirs) -> np.ndarray:
    total = np.zeros(np.atleast_2d(origins).shape[0])
    for prim in phantom.metal:
        total += chord_lengths(prim, origins, dirs)
    return total


# ---------------------------------------------------------------------------
# point membership (for ground-truth voxelization)


def contains(prim: Primitive, points) -> np.ndarray:
    p = np.asarray(points, dtype=float) - np.asarray(prim.center_mm)
    if prim.kind == "sphere":
        return np.einsum("...k,...k->...", p, p) <= prim.radius_mm**2
    if prim.kind == "box":
        h = np.asarray(prim.half_widths_mm)
        return np.all(np.abs(p) <= h, axis=-1)
    a = np.asarray(prim.axis)
    s = p @ a
    perp = p - s[..., None] * a
    return (np.abs(s) <= prim.half_length_mm) & (np.einsum("...k,...k->...", perp, perp) <= prim.radius_mm**2)


def mu_at(phantom: Phantom, points, include_metal: bool = True) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.shape[:-1])
    for i, prim in enumerate(phantom.primitives):
        if not include_metal and i in phantom.metal_indices:
            continue
        out += prim.mu_per_mm * contains(prim, points)
    return out


# ---------------------------------------------------------------------------
# generators


def build_chest_phantom(seed: int, symmetric: bool = False) -> Phantom:
    """Two gel cylinders on a beam with two metal screws; task between the screws.

    Every primitive is centred in the z = 0 plane. Both screws share a random
    cranio-caudal inclination; with ``symmetric=True`` it is zero and the scene
    is mirror-symmetric under z -> -z.
    """
    rng = np.random.default_rng(seed)
    b = CHEST_BOUNDS

    def u(key):
        lo, hi = b[key]
        return float(rng.uniform(lo, hi))

    prims = []
    for side in (-1.0, 1.0):
        prims.append(
            cylinder(
                (side * u("gel_offset_x"), u("gel_offset_y"), 0.0),
                (0.0, 0.0, 1.0),
                u("gel_radius"),
                u("gel_half_length"),
                MU_SOFT,
            )
        )
    beam_y = u("beam_center_y")
    prims.append(box((0.0, beam_y, 0.0), (u("beam_half_x"), u("beam_half_y"), u("beam_half_z")), MU_BEAM))

    screw = []
    for side in (-1.0, 1.0):
        screw.append((side, u("screw_offset_x"), u("screw_convergence_deg"), u("screw_radius"), u("screw_half_length")))
    incl = u("screw_inclination_deg") * (1.0 if rng.random() < 0.5 else -1.0)
    if symmetric:
        incl = 0.0
    ci, si = np.cos(np.radians(incl)), np.sin(np.radians(incl))

    screw_centers = []
    for side, offset, conv_deg, radius, half_length in screw:
        x = side * offset
        conv = np.radians(conv_deg)
        # anterior-posterior screws tilted towards the midline and inclined in z
        axis = (-side * np.sin(conv) * ci, np.cos(conv) * ci, si)
        center = (x, beam_y, 0.0)
        screw_centers.append(center)
        prims.append(cylinder(center, axis, radius, half_length, MU_METAL))

    task_center = tuple(float(v) for v in np.mean(screw_centers, axis=0))
    return Phantom(tuple(prims), metal_indices=(3, 4), rng_seed=int(seed), task=TaskRegion(task_center))


def build_sphere_phantom(radius: float = 40.0, mu: float = MU_SOFT, center=(0.0, 0.0, 0.0)) -> Phantom:
    """Single uniform sphere; rotationally symmetric about any axis through its center."""
    return Phantom((sphere(center, radius, mu),), task=TaskRegion(tuple(map(float, center))))


# ---------------------------------------------------------------------------
# scene file: one primitive per line, ``kind cx cy cz p1 p2 p3 p4 mu metal_flag``
#   sphere:          p1 = radius
#   box:             p1..p3 = half-widths
#   capped-cylinder: p1..p3 = axis * half_length, p4 = radius
# a ``# task cx cy cz radius`` comment line carries the task region


def _fmt(x: float) -> str:
    return repr(float(x))


def save_scene(phantom: Phantom, path) -> None:
    lines = [f"# trajsim scene seed={phantom.rng_seed}"]
    if phantom.task is not None:
        t = phantom.task
        lines.append("# task " + " ".join(_fmt(v) for v in (*t.center_mm, t.radius_mm)))
    for i, p in enumerate(phantom.primitives):
        if p.kind == "sphere":
            params = (p.radius_mm, 0.0, 0.0, 0.0)
        elif p.kind == "box":
            params = (*p.half_widths_mm, 0.0)
        else:
            ax = np.asarray(p.axis) * p.half_length_mm
            params = (*ax, p.radius_mm)
        flag = 1 if i in phantom.metal_indices else 0
        fields = [p.kind, *(_fmt(v) for v in p.center_mm), *(_fmt(v) for v in params), _fmt(p.mu_per_mm), str(flag)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Phantom:
    prims, metal = [], []
    task = None
    seed = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            if tok and tok[0] == "task":
                v = [float(x) for x in tok[1:5]]
                task = TaskRegion(tuple(v[:3]), v[3])
            elif tok and tok[0] == "trajsim":
                for t in tok:
                    if t.startswith("seed="):
                        seed = int(t[5:])
            continue
        tok = line.split()
        if len(tok) != 10:
            raise PhantomError(f"{path}:{lineno}: expected 10 fields, got {len(tok)}")
        kind = tok[0]
        c = tuple(float(x) for x in tok[1:4])
        p = [float(x) for x in tok[4:8]]
        mu = float(tok[8])
        if kind == "sphere":
            prims.append(sphere(c, p[0], mu))
        elif kind == "box":
            prims.append(box(c, p[:3], mu))
        elif kind == "capped-cylinder":
            ax = np.asarray(p[:3])
            hl = float(np.linalg.norm(ax))
            prims.append(cylinder(c, ax / hl, p[3], hl, mu))
        else:
            raise PhantomError(f"{path}:{lineno}: unknown primitive kind {kind!r}")
        if int(tok[9]):
            metal.append(len(prims) - 1)
    return Phantom(tuple(prims), tuple(metal), seed, task)
