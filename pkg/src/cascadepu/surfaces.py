"""Analytic surfaces and triangle meshes: area-uniform sampling and exact unsigned distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("sphere", "plane", "torus", "box")


@dataclass(frozen=True)
class AnalyticSurface:
    """A closed-form surface centred at the origin.

    ``size`` holds the kind-specific extents:

    * sphere: ``(radius,)``
    * plane: ``(half_x, half_y)`` -- a rectangle in the z = 0 plane
    * torus: ``(major_radius, minor_radius)`` with minor < major, axis along z
    * box: ``(half_x, half_y, half_z)`` -- the surface of the box
    """

    kind: str
    size: tuple[float, ...]

    def __post_init__(self):
        arity = {"sphere": 1, "plane": 2, "torus": 2, "box": 3}
        if self.kind not in arity:
            raise ValueError(f"unknown surface kind {self.kind!r}; expected one of {KINDS}")
        if len(self.size) != arity[self.kind]:
            raise ValueError(f"{self.kind} takes {arity[self.kind]} size parameters, got {len(self.size)}")
        if any(not (s > 0) for s in self.size):
            raise ValueError(f"surface sizes must be strictly positive, got {self.size}")
        if self.kind == "torus" and self.size[1] >= self.size[0]:
            raise ValueError("torus minor radius must be smaller than its major radius")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @classmethod
    def sphere(cls, radius: float = 1.0) -> "AnalyticSurface":
        return cls("sphere", (radius,))

    @classmethod
    def plane(cls, half_x: float = 1.0, half_y: float = 1.0) -> "AnalyticSurface":
        return cls("plane", (half_x, half_y))

    @classmethod
    def torus(cls, major: float = 1.0, minor: float = 0.35) -> "AnalyticSurface":
        return cls("torus", (major, minor))

    @classmethod
    def box(cls, hx: float = 1.0, hy: float = 1.0, hz: float = 1.0) -> "AnalyticSurface":
        return cls("box", (hx, hy, hz))

    def area(self) -> float:
        s = self.size
        if self.kind == "sphere":
            return 4 * np.pi * s[0] ** 2
        if self.kind == "plane":
            return 4 * s[0] * s[1]
        if self.kind == "torus":
            return 4 * np.pi ** 2 * s[0] * s[1]
        hx, hy, hz = s
        return 8 * (hx * hy + hy * hz + hx * hz)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points distributed uniformly with respect to surface area."""
        if n < 1:
            raise ValueError(f"sample count must be positive, got {n}")
        s = self.size
        if self.kind == "sphere":
            g = rng.standard_normal((n, 3))
            return s[0] * g / np.linalg.norm(g, axis=1, keepdims=True)
        if self.kind == "plane":
            xy = rng.uniform(-1.0, 1.0, size=(n, 2)) * np.array(s)
            return np.column_stack([xy, np.zeros(n)])
        if self.kind == "torus":
            return self._sample_torus(n, rng)
        return self._sample_box(n, rng)

    def _sample_torus(self, n, rng):
        big, small = self.size
        u_out, v_out = [], []
        have = 0
        while have < n:
            m = 2 * (n - have) + 16
            u = rng.uniform(0, 2 * np.pi, m)
            v = rng.uniform(0, 2 * np.pi, m)
            # Area element is proportional to (R + r cos v).
            keep = rng.uniform(0, 1, m) * (big + small) <= big + small * np.cos(v)
            u_out.append(u[keep])
            v_out.append(v[keep])
            have += int(keep.sum())
        u = np.concatenate(u_out)[:n]
        v = np.concatenate(v_out)[:n]
        rho = big + small * np.cos(v)
        return np.column_stack([rho * np.cos(u), rho * np.sin(u), small * np.sin(v)])

    def _sample_box(self, n, rng):
        h = np.array(self.size)
        # Face pairs normal to x, y, z.
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return pts

    def distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        s = self.size
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=1) - s[0])
        if self.kind == "plane":
            dx = np.maximum(np.abs(p[:, 0]) - s[0], 0.0)
            dy = np.maximum(np.abs(p[:, 1]) - s[1], 0.0)
            return np.sqrt(dx * dx + dy * dy + p[:, 2] ** 2)
        if self.kind == "torus":
            rho = np.hypot(p[:, 0], p[:, 1])
            return np.abs(np.hypot(rho - s[0], p[:, 2]) - s[1])
        q = np.abs(p) - np.array(s)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = -q.max(axis=1)
        return np.where(q.max(axis=1) > 0, outside, inside)


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                                c: np.ndarray) -> np.ndarray:
    """Closest point on each triangle (a, b, c) to each query; shapes broadcast.

    Region tests follow the usual Voronoi-region classification of the
    triangle's vertices, edges and face.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c

    def dot(u, v):
        return np.einsum("...k,...k->...", u, v)

    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_face, w_face = vb * denom, vc * denom

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    shape = np.broadcast_shapes(p.shape, a.shape)
    cands = [
        np.broadcast_to(a, shape),
        np.broadcast_to(b, shape),
        a + t_ab[..., None] * ab,
        np.broadcast_to(c, shape),
        a + t_ac[..., None] * ac,
        b + t_bc[..., None] * (c - b),
    ]
    out = a + v_face[..., None] * ab + w_face[..., None] * ac
    for cond, cand in zip(reversed(conds), reversed(cands)):
        out = np.where(cond[..., None], cand, out)
    return out


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.size == 0:
            raise ValueError("triangle mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be an F x 3 index array, got shape {f.shape}")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise ValueError("face references a vertex that does not exist")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        out = np.empty(p.shape[0])
        step = max(1, 200_000 // len(self.faces))
        for s in range(0, p.shape[0], step):
            q = p[s:s + step, None, :]
            cp = closest_points_on_triangles(q, a[None], b[None], c[None])
            d = np.linalg.norm(cp - q, axis=-1)
            out[s:s + step] = d.min(axis=1)
        return out
