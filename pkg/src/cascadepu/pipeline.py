"""Shape synthesis, patch extraction, patch-based upsampling, evaluation and cloud I/O."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    PointCloud,
    chamfer_distance,
    farthest_point_sample,
    hausdorff_distance,
    knn_indices,
    normalize_to_unit_sphere,
    point_to_surface,
)
from .network import NetworkParams, cascade_forward
from .surfaces import AnalyticSurface, TriangleMesh
from .tensor import no_grad

COVERAGE_FACTOR = 3


@dataclass
class PatchSet:
    """Normalised local patches plus what is needed to map them back."""

    patches: list[PointCloud]
    seeds: np.ndarray
    source: PointCloud | None = field(default=None, repr=False)
    members: list[np.ndarray] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @classmethod
    def merge(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        patches = [p for s in sets for p in s.patches]
        seeds = np.concatenate([s.seeds for s in sets]) if sets else np.zeros(0, dtype=np.int64)
        members = [m for s in sets for m in s.members]
        return cls(patches, seeds, None, members)


def generate_shape(surface: AnalyticSurface, n: int, rng: np.random.Generator) -> PointCloud:
    return PointCloud(surface.sample(n, rng))


def extract_patches(cloud: PointCloud, num_seeds: int | None = None,
                    patch_size: int = 256) -> PatchSet:
    """Split a cloud into overlapping kNN patches around farthest-point seeds.

    With ``num_seeds=None`` the seed count starts at ``ceil(3 M / patch_size)``
    and grows (continuing the same farthest-point order) until every source
    point lies in at least one patch.
    """
    pts = cloud.points
    m = pts.shape[0]
    if patch_size < 1 or patch_size > m:
        raise ValueError(f"patch_size={patch_size} must lie in [1, {m}]")
    if num_seeds is not None and num_seeds < 1:
        raise ValueError(f"num_seeds must be positive, got {num_seeds}")

    if num_seeds is not None:
        seeds = farthest_point_sample(pts, min(num_seeds, m), 0)
        members = knn_indices(pts, pts[seeds], patch_size)
    else:
        count = min(m, math.ceil(COVERAGE_FACTOR * m / patch_size))
        while True:
            seeds = farthest_point_sample(pts, count, 0)
            members = knn_indices(pts, pts[seeds], patch_size)
            covered = np.zeros(m, dtype=bool)
            covered[members.reshape(-1)] = True
            if covered.all() or count == m:
                break
            count = min(m, count + max(1, count // 4))

    patches = []
    for i, (seed, idx) in enumerate(zip(seeds, members)):
        normed, record = normalize_to_unit_sphere(pts[idx])
        patches.append(PointCloud(normed.points, normalization=record, patch_id=int(seed)))
    return PatchSet(patches, np.asarray(seeds), cloud, list(members))


# ----------------------------------------------------------------- toy corpus

TOY_SHAPES = {
    "sphere": AnalyticSurface.sphere(1.0),
    "torus": AnalyticSurface.torus(1.0, 0.35),
    "box": AnalyticSurface.box(1.0, 0.7, 0.5),
    "plane": AnalyticSurface.plane(1.0, 1.0),
}
# Same families with different proportions, never used for training.
HELDOUT_SHAPES = {
    "sphere": AnalyticSurface.sphere(0.6),
    "torus": AnalyticSurface.torus(1.0, 0.5),
    "box": AnalyticSurface.box(0.6, 1.0, 0.8),
    "plane": AnalyticSurface.plane(1.0, 0.5),
}


def parse_toy_uri(uri: str) -> list[str]:
    """``toy://sphere,torus`` -> ["sphere", "torus"]; ``toy://all`` -> every toy shape."""
    if not uri.startswith("toy://"):
        raise ValueError(f"not a toy dataset URI: {uri!r}")
    body = uri[len("toy://"):]
    names = list(TOY_SHAPES) if body in ("", "all") else [s.strip() for s in body.split(",") if s.strip()]
    for n in names:
        if n not in TOY_SHAPES:
            raise ValueError(f"unknown toy shape {n!r}; choose from {sorted(TOY_SHAPES)}")
    return names


def even_shape(surface: AnalyticSurface, n: int, rng: np.random.Generator,
               oversample: int = 5) -> PointCloud:
    """Evenly spaced surface sample: a random sample ``oversample`` times too
    dense, thinned to ``n`` points by farthest point sampling."""
    dense = surface.sample(oversample * n, rng)
    return PointCloud(dense[farthest_point_sample(dense, n, 0)])


def shape_patches(surface: AnalyticSurface, num_patches: int, patch_size: int,
                  rng: np.random.Generator, density: int = 8) -> PatchSet:
    """Ground-truth training patches cut from an evenly spaced sample of ``surface``."""
    dense = even_shape(surface, density * patch_size, rng)
    return extract_patches(dense, num_seeds=num_patches, patch_size=patch_size)


def toy_patchset(names: Sequence[str], patches_per_shape: int, patch_size: int, seed: int,
                 heldout: bool = False) -> PatchSet:
    rng = np.random.default_rng(seed)
    table = HELDOUT_SHAPES if heldout else TOY_SHAPES
    return PatchSet.merge([shape_patches(table[n], patches_per_shape, patch_size, rng) for n in names])


def manifest_patchset(path, patches_per_cloud: int, patch_size: int) -> PatchSet:
    """Ground-truth patches from every dense cloud listed in a manifest."""
    sets = []
    for cloud_path, _ in read_manifest(path):
        if not cloud_path.exists():
            raise FileNotFoundError(f"manifest {path} lists a missing cloud: {cloud_path}")
        cloud = read_cloud(cloud_path)
        sets.append(extract_patches(cloud, num_seeds=patches_per_cloud, patch_size=patch_size))
    if not sets:
        raise ValueError(f"manifest {path} lists no clouds")
    return PatchSet.merge(sets)


# ----------------------------------------------------------------- inference

def _upsample_once(pts: np.ndarray, net: NetworkParams, use_refiner: bool, patch_size: int,
                   num_seeds: int | None) -> np.ndarray:
    m = pts.shape[0]
    k_max = max(c.k_attention for c in net.configs)
    if m < k_max:
        raise ValueError(f"cloud has {m} points, fewer than k_attention={k_max}")
    patches = extract_patches(PointCloud(pts), num_seeds, min(patch_size, m))
    pieces = []
    with no_grad():
        for patch in patches:
            out = cascade_forward(patch.points, net, use_refiner=use_refiner)[-1]
            pieces.append(patch.normalization.invert(out.data))
    merged = np.concatenate(pieces, axis=0)
    target = net.rate * m
    if merged.shape[0] < target:
        raise ValueError(f"patches produced {merged.shape[0]} points, fewer than the {target} requested")
    return merged[farthest_point_sample(merged, target, 0)]


def upsample_cloud(cloud: PointCloud, net: NetworkParams, r_total: int = 4, use_refiner: bool = True,
                   patch_size: int = 256, num_seeds: int | None = None) -> PointCloud:
    """Patch-wise upsampling followed by a farthest-point merge to exactly ``r_total * M`` points.

    A rate of 16 applies the x4 cascade twice.
    """
    if net.rate != 4:
        raise ValueError(f"network rate is x{net.rate}; patch upsampling expects an x4 cascade")
    if r_total not in (4, 16):
        raise ValueError(f"r_total must be 4 or 16, got {r_total}")
    pts = _upsample_once(cloud.points, net, use_refiner, patch_size, num_seeds)
    if r_total == 16:
        pts = _upsample_once(pts, net, use_refiner, patch_size, num_seeds)
    return PointCloud(pts)


# ----------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class Metrics:
    cd: float
    hd: float
    p2f: float | None = None

    def scaled(self, factor: float = 1e3) -> "Metrics":
        return Metrics(self.cd * factor, self.hd * factor,
                       None if self.p2f is None else self.p2f * factor)

    def as_dict(self) -> dict:
        return {"cd": self.cd, "hd": self.hd, "p2f": self.p2f}


def evaluate(pred: PointCloud, gt: PointCloud, surface=None) -> Metrics:
    """CD, HD and (optionally) P2F after mapping both clouds with the ground truth's unit-sphere normalisation."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("evaluate: empty point cloud")
    gt_n, record = normalize_to_unit_sphere(gt)
    pred_n = record.apply(pred.points)
    cd = float(chamfer_distance(pred_n, gt_n.points).data)
    hd = hausdorff_distance(pred_n, gt_n.points)
    p2f = None
    if surface is not None:
        # Distances scale linearly with the normalisation and ignore translation.
        p2f = point_to_surface(pred.points, surface) / record.scale
    return Metrics(cd, hd, p2f)


# ----------------------------------------------------------------- file formats

FORMATS = ("xyz", "ply", "off")


class CloudFormatError(ValueError):
    pass


def _infer_format(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in FORMATS:
        raise ValueError(f"unknown point cloud format {fmt!r} for {path}; expected one of {FORMATS}")
    return fmt


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "off":
        return _read_off(path)
    return _read_ply(path)


def write_cloud(cloud: PointCloud, path, fmt: str | None = None, binary: bool = False) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    pts = cloud.points
    if fmt == "xyz":
        path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))
    elif fmt == "off":
        faces = cloud.faces if cloud.faces is not None else np.zeros((0, 3), dtype=np.int64)
        lines = ["OFF", f"{len(pts)} {len(faces)} 0"]
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
        lines += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
        path.write_text("\n".join(lines) + "\n")
    else:
        kind = "binary_little_endian" if binary else "ascii"
        header = (f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
                  "property double x\nproperty double y\nproperty double z\nend_header\n")
        if binary:
            path.write_bytes(header.encode("ascii") + pts.astype("<f8").tobytes())
        else:
            path.write_text(header + "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))


def _floats(tokens: list[str], path: Path, lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise CloudFormatError(f"{path}:{lineno}: non-numeric token in {' '.join(tokens)!r}") from None


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = re.split(r"[\s,]+", line)
        if len(tokens) not in (3, 6):
            raise CloudFormatError(f"{path}:{lineno}: expected 3 (or 6) values, found {len(tokens)}")
        rows.append(_floats(tokens, path, lineno)[:3])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def _read_off(path: Path) -> PointCloud:
    lines = [(i, l.split("#", 1)[0].strip()) for i, l in enumerate(path.read_text().splitlines(), start=1)]
    lines = [(i, l) for i, l in lines if l]
    if not lines or not lines[0][1].startswith("OFF"):
        raise CloudFormatError(f"{path}:1: missing OFF header")
    head = lines[0][1][3:].split()
    pos = 1
    if not head:
        if len(lines) < 2:
            raise CloudFormatError(f"{path}: missing OFF counts line")
        lineno, text = lines[1]
        head = text.split()
        pos = 2
    else:
        lineno = lines[0][0]
    counts = _floats(head[:3], path, lineno)
    if len(counts) < 2:
        raise CloudFormatError(f"{path}:{lineno}: OFF counts line needs vertex and face counts")
    nv, nf = int(counts[0]), int(counts[1])
    if len(lines) < pos + nv + nf:
        raise CloudFormatError(f"{path}: file ends before {nv} vertices and {nf} faces were read")
    verts = []
    for lineno, text in lines[pos:pos + nv]:
        vals = _floats(text.split(), path, lineno)
        if len(vals) < 3:
            raise CloudFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
        verts.append(vals[:3])
    faces = []
    for lineno, text in lines[pos + nv:pos + nv + nf]:
        vals = [int(v) for v in _floats(text.split(), path, lineno)]
        n = vals[0]
        if n < 3 or len(vals) < n + 1:
            raise CloudFormatError(f"{path}:{lineno}: malformed face record")
        poly = vals[1:n + 1]
        faces.extend([poly[0], poly[j], poly[j + 1]] for j in range(1, n - 1))
    return PointCloud(np.array(verts, dtype=np.float64).reshape(-1, 3),
                      faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path) -> PointCloud:
    raw = path.read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}:1: not a PLY file (missing 'ply' magic or end_header)")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}:{lineno}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"{path}:{lineno}: unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudFormatError(f"{path}: unsupported PLY format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise CloudFormatError(f"{path}: PLY has no vertex element")
    vi = names.index("vertex")
    _, nverts, props = elements[vi]
    if any(t == "list" for _, t in props):
        raise CloudFormatError(f"{path}: list properties on vertices are not supported")
    pnames = [p for p, _ in props]
    for axis in "xyz":
        if axis not in pnames:
            raise CloudFormatError(f"{path}: vertex element lacks property {axis!r}")

    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
        # One row per element item, so earlier elements just shift the start.
        skip = sum(e[1] for e in elements[:vi])
        first_body_line = len(header) + 2
        cols = [pnames.index(a) for a in "xyz"]
        rows = []
        for j in range(skip, skip + nverts):
            lineno = first_body_line + j
            if j >= len(lines):
                raise CloudFormatError(f"{path}:{lineno}: file ends inside the vertex block")
            vals = _floats(lines[j].split(), path, lineno)
            if len(vals) < len(props):
                raise CloudFormatError(f"{path}:{lineno}: vertex row has {len(vals)} values, expected {len(props)}")
            rows.append([vals[c] for c in cols])
        pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    else:
        if any(t == "list" for e in elements[:vi] for _, t in e[2]):
            raise CloudFormatError(f"{path}: binary list elements before the vertex block are not supported")
        offset = body_start + sum(e[1] * sum(np.dtype("<" + t).itemsize for _, t in e[2])
                                  for e in elements[:vi])
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        need = offset + nverts * dtype.itemsize
        if len(raw) < need:
            raise CloudFormatError(f"{path}: byte {len(raw)}: file ends inside the vertex block "
                                   f"(needs {need} bytes)")
        rec = np.frombuffer(raw, dtype=dtype, count=nverts, offset=offset)
        pts = np.column_stack([rec[a].astype(np.float64) for a in "xyz"])
    return PointCloud(pts)


def mesh_from_cloud(cloud: PointCloud) -> TriangleMesh:
    if cloud.faces is None or len(cloud.faces) == 0:
        raise ValueError("cloud carries no faces; a mesh file (OFF) is required")
    return TriangleMesh(cloud.points, cloud.faces)


def read_manifest(path) -> list[tuple[Path, Path | None]]:
    """Lines of ``cloud_path [mesh_path]``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise CloudFormatError(f"{path}:{lineno}: expected 'cloud [mesh]', got {len(parts)} fields")
        cloud = (path.parent / parts[0]).resolve()
        mesh = (path.parent / parts[1]).resolve() if len(parts) == 2 else None
        entries.append((cloud, mesh))
    return entries
