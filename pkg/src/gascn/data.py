"""Synthetic shapes, simulated partial scans, and point-cloud file I/O."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, as_points, normalize_cloud

KINDS = ("sphere", "box", "cylinder", "capsule", "lamp")


# ------------------------------------------------------------------ primitives


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _pick_parts(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _sample_sphere(rng, n, radius):
    nrm = _unit_vectors(rng, n)
    return radius * nrm, nrm


def _sample_box(rng, n, size):
    half = np.asarray(size, dtype=np.float64) / 2
    sx, sy, sz = 2 * half
    axis = _pick_parts(rng, [sy * sz, sx * sz, sx * sy], n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-half, half, size=(n, 3))
    nrm = np.zeros((n, 3))
    rows = np.arange(n)
    pts[rows, axis] = sign * half[axis]
    nrm[rows, axis] = sign
    return pts, nrm


def _sample_tube(rng, n, radius, z0, z1):
    theta = rng.uniform(0, 2 * np.pi, n)
    c, s = np.cos(theta), np.sin(theta)
    pts = np.stack([radius * c, radius * s, rng.uniform(z0, z1, n)], axis=1)
    return pts, np.stack([c, s, np.zeros(n)], axis=1)


def _sample_disk(rng, n, radius, z, up):
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, z)], axis=1)
    nrm = np.zeros((n, 3))
    nrm[:, 2] = 1.0 if up else -1.0
    return pts, nrm


def _sample_frustum(rng, n, r0, r1, z0, height):
    # Area density grows linearly with the local radius; invert its CDF.
    u = rng.uniform(0, 1, n)
    if abs(r1 - r0) < 1e-12:
        t = u
    else:
        t = (np.sqrt(r0 * r0 + u * (r1 * r1 - r0 * r0)) - r0) / (r1 - r0)
    r = r0 + (r1 - r0) * t
    theta = rng.uniform(0, 2 * np.pi, n)
    c, s = np.cos(theta), np.sin(theta)
    pts = np.stack([r * c, r * s, z0 + t * height], axis=1)
    nrm = np.stack([height * c, height * s, np.full(n, r0 - r1)], axis=1)
    return pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def _frustum_area(r0, r1, h):
    return math.pi * (r0 + r1) * math.hypot(r1 - r0, h)


def _sample_parts(rng, n, parts):
    """``parts`` is a list of (area, sampler(rng, count)) pairs."""
    which = _pick_parts(rng, [a for a, _ in parts], n)
    pts, nrm = np.empty((n, 3)), np.empty((n, 3))
    for i, (_, sampler) in enumerate(parts):
        sel = np.flatnonzero(which == i)
        if sel.size:
            pts[sel], nrm[sel] = sampler(rng, sel.size)
    return pts, nrm


def _cylinder(rng, n, radius, height):
    h = height / 2
    return _sample_parts(rng, n, [
        (2 * math.pi * radius * height, lambda g, k: _sample_tube(g, k, radius, -h, h)),
        (math.pi * radius**2, lambda g, k: _sample_disk(g, k, radius, h, True)),
        (math.pi * radius**2, lambda g, k: _sample_disk(g, k, radius, -h, False)),
    ])


def _capsule(rng, n, radius, height):
    h = height / 2

    def caps(g, k):
        p, nrm = _sample_sphere(g, k, radius)
        p[:, 2] += np.where(p[:, 2] >= 0, h, -h)
        return p, nrm

    return _sample_parts(rng, n, [
        (2 * math.pi * radius * height, lambda g, k: _sample_tube(g, k, radius, -h, h)),
        (4 * math.pi * radius**2, caps),
    ])


def _lamp(rng, n, base_radius, base_height, pole_radius, pole_height, shade_bottom, shade_top, shade_height):
    z_pole = base_height
    z_shade = base_height + pole_height
    return _sample_parts(rng, n, [
        (2 * math.pi * base_radius * base_height, lambda g, k: _sample_tube(g, k, base_radius, 0.0, base_height)),
        (math.pi * base_radius**2, lambda g, k: _sample_disk(g, k, base_radius, base_height, True)),
        (math.pi * base_radius**2, lambda g, k: _sample_disk(g, k, base_radius, 0.0, False)),
        (2 * math.pi * pole_radius * pole_height, lambda g, k: _sample_tube(g, k, pole_radius, z_pole, z_shade)),
        (_frustum_area(shade_bottom, shade_top, shade_height),
         lambda g, k: _sample_frustum(g, k, shade_bottom, shade_top, z_shade, shade_height)),
    ])


_SAMPLERS = {
    "sphere": (_sample_sphere, ("radius",)),
    "box": (_sample_box, ("size",)),
    "cylinder": (_cylinder, ("radius", "height")),
    "capsule": (_capsule, ("radius", "height")),
    "lamp": (_lamp, ("base_radius", "base_height", "pole_radius", "pole_height",
                     "shade_bottom", "shade_top", "shade_height")),
}
_SYMMETRIC = {"sphere", "box", "cylinder", "capsule"}


def _check_dims(kind: str, params: dict) -> None:
    _, names = _SAMPLERS[kind]
    missing = [k for k in names if k not in params]
    if missing:
        raise ValueError(f"{kind} needs parameters {missing}")
    for k in names:
        vals = np.atleast_1d(np.asarray(params[k], dtype=np.float64))
        if kind == "box" and vals.shape != (3,):
            raise ValueError("box size needs three extents")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ValueError(f"{kind} parameter {k!r} must be positive, got {params[k]!r}")
    if kind == "lamp" and params["pole_radius"] >= params["base_radius"]:
        raise ValueError("lamp pole must be thinner than its base")


def gen_primitive(kind: str, params: dict, n_points: int, seed: int) -> PointCloud:
    """Area-uniform surface sample of a primitive with analytic normals, normalised.

    Centrally symmetric primitives are sampled in antipodal pairs, so their
    sample centroid is exactly the shape centre.
    """
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {KINDS}")
    if n_points < 4:
        raise ValueError("n_points must be at least 4")
    _check_dims(kind, params)
    sampler, names = _SAMPLERS[kind]
    rng = np.random.default_rng(seed)
    args = [params[k] for k in names]
    if kind in _SYMMETRIC:
        half = (n_points + 1) // 2
        p, nrm = sampler(rng, half, *args)
        pts = np.concatenate([p, -p])[:n_points]
        normals = np.concatenate([nrm, -nrm])[:n_points]
    else:
        pts, normals = sampler(rng, n_points, *args)
    normalized, _, _ = normalize_cloud(PointCloud(pts, normals=normals))
    return normalized


def random_params(kind: str, rng) -> dict:
    """Draw primitive dimensions for dataset generation."""
    u = rng.uniform
    if kind == "sphere":
        return {"radius": 1.0}
    if kind == "box":
        return {"size": [float(v) for v in u(0.3, 1.0, 3)]}
    if kind == "cylinder":
        return {"radius": float(u(0.2, 0.6)), "height": float(u(0.4, 1.5))}
    if kind == "capsule":
        return {"radius": float(u(0.15, 0.4)), "height": float(u(0.3, 1.2))}
    if kind == "lamp":
        return {
            "base_radius": float(u(0.25, 0.4)), "base_height": float(u(0.03, 0.08)),
            "pole_radius": 0.03, "pole_height": float(u(0.4, 0.8)),
            "shade_bottom": float(u(0.25, 0.45)), "shade_top": float(u(0.1, 0.2)),
            "shade_height": float(u(0.2, 0.35)),
        }
    raise ValueError(f"unknown primitive {kind!r}")


# --------------------------------------------------------------- partial views


def _view_basis(view_dir: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(view_dir[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(view_dir, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(view_dir, a)


def simulate_partial_view(
    cloud: PointCloud,
    view_dir,
    resolution: int = 64,
    delta: float = 0.02,
    return_index: bool = False,
):
    """Points seen by an orthographic depth camera looking along ``-view_dir``.

    Points are binned into a ``resolution x resolution`` image; within each pixel
    only points within ``delta`` of the nearest depth survive.  When the cloud
    carries normals, back-facing points are culled first so pixels that hold no
    front-surface sample cannot leak the far side.
    """
    pts = as_points(cloud)
    v = np.asarray(view_dir, dtype=np.float64).reshape(3)
    v = v / np.linalg.norm(v)
    candidates = np.arange(pts.shape[0])
    normals = cloud.normals if isinstance(cloud, PointCloud) else None
    if normals is not None:
        front = np.flatnonzero(normals @ v > 0)
        if front.size:
            candidates = front
    a, b = _view_basis(v)
    sub = pts[candidates]
    uv = np.stack([sub @ a, sub @ b], axis=1)
    lo = uv.min(axis=0)
    extent = max(float((uv.max(axis=0) - lo).max()), 1e-12)
    pix = np.minimum((((uv - lo) / extent) * resolution).astype(np.int64), resolution - 1)
    flat = pix[:, 0] * resolution + pix[:, 1]
    depth = sub @ v
    nearest_depth = np.full(resolution * resolution, -np.inf)
    np.maximum.at(nearest_depth, flat, depth)
    keep = np.sort(candidates[depth >= nearest_depth[flat] - delta])
    out = cloud.subset(keep) if isinstance(cloud, PointCloud) else PointCloud(pts[keep])
    return (out, keep) if return_index else out


def clip_input(cloud, max_points: int = 3000, seed: int = 0) -> PointCloud:
    """Randomly permute the points and keep at most ``max_points`` of them."""
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(as_points(cloud))
    order = np.random.default_rng(seed).permutation(len(pc))
    return pc.subset(order[:max_points])


# ----------------------------------------------------------------------- PLY


class PlyError(ValueError):
    """Base class for PLY parse failures."""


class PlyHeaderError(PlyError):
    pass


class PlyPropertyError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with x y z, optional nx ny nz, optional quality (scalar field)."""
    cols = [cloud.points]
    props = ["x", "y", "z"]
    if cloud.normals is not None:
        cols.append(cloud.normals)
        props += ["nx", "ny", "nz"]
    if cloud.scalar_field is not None:
        cols.append(cloud.scalar_field[:, None])
        props.append("quality")
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    body = np.concatenate(cols, axis=1)
    lines = [" ".join(f"{v:.9g}" for v in row) for row in body]
    Path(path).write_text("\n".join(header + lines) + "\n")


def _parse_ply_header(raw: bytes) -> tuple[str, int, list[tuple[str, str]], int]:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyHeaderError("missing 'ply' magic line or 'end_header'")
    body_start = raw.index(b"\n", end) + 1 if b"\n" in raw[end:] else len(raw)
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props, current = None, None, [], None
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] == "vertex":
                current, count = "vertex", int(tok[2])
            elif count is None:
                raise PlyHeaderError(f"element {tok[1]!r} precedes the vertex element")
            else:
                current = tok[1]
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise PlyPropertyError("list properties are not supported on vertices")
            if tok[1] not in _PLY_TYPES:
                raise PlyPropertyError(f"unknown property type {tok[1]!r}")
            props.append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyHeaderError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise PlyHeaderError("header has no 'element vertex' line")
    names = [p for p, _ in props]
    for p, t in props:
        if p in ("x", "y", "z", "nx", "ny", "nz", "quality") and not _PLY_TYPES[t].startswith("f"):
            raise PlyPropertyError(f"property {p!r} must be a float type, got {t!r}")
    if not {"x", "y", "z"} <= set(names):
        raise PlyPropertyError("vertex element needs x, y and z properties")
    return fmt, count, props, body_start


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    fmt, count, props, start = _parse_ply_header(raw)
    names = [p for p, _ in props]
    if fmt == "ascii":
        rows = [ln for ln in raw[start:].decode("ascii").splitlines() if ln.strip()]
        if len(rows) < count:
            raise PlyTruncatedError(f"expected {count} vertices, found {len(rows)}")
        try:
            table = np.array([[float(t) for t in r.split()[: len(props)]] for r in rows[:count]], dtype=np.float64)
        except ValueError as exc:
            raise PlyPropertyError(f"non-numeric vertex value: {exc}") from None
        if count and table.shape[1] != len(props):
            raise PlyTruncatedError("vertex row has fewer values than declared properties")
        cols = {n: table[:, i] for i, n in enumerate(names)} if count else {n: np.zeros(0) for n in names}
    else:
        dtype = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t in props])
        need = dtype.itemsize * count
        if len(raw) - start < need:
            raise PlyTruncatedError(f"binary body holds {len(raw) - start} bytes, expected {need}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        cols = {n: rec[n].astype(np.float64) for n in names}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1) if {"nx", "ny", "nz"} <= set(cols) else None
    if normals is not None:
        # Nine printed digits can leave normals a few 1e-9 off unit length.
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals=normals, scalar_field=cols.get("quality"))


# ----------------------------------------------------------------------- XYZ


class XyzParseError(ValueError):
    pass


def write_xyz(cloud, path) -> None:
    pts = as_points(cloud)
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


def read_xyz(path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 3:
            raise XyzParseError(f"line {lineno}: expected 3 values, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise XyzParseError(f"line {lineno}: non-numeric token in {line.strip()!r}") from None
    if not rows:
        raise XyzParseError("file holds no points")
    return PointCloud(np.array(rows))


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: ``.ply`` or ``.xyz``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".xyz", ".txt"):
        return read_xyz(path)
    raise ValueError(f"unsupported point cloud extension {suffix!r}")


# ------------------------------------------------------------------- dataset


@dataclass
class DatasetSpec:
    n_shapes: int = 100
    categories: tuple[str, ...] = KINDS
    views: int = 8
    gt_points: int = 2304
    scan_points: int = 2048
    resolution: int = 64
    delta: float = 0.02
    min_points: int = 21
    max_retries: int = 50

    def __post_init__(self):
        self.categories = tuple(self.categories)
        bad = set(self.categories) - set(KINDS)
        if bad:
            raise ValueError(f"unknown categories {sorted(bad)}")
        if self.n_shapes < 1 or self.views < 1 or self.gt_points < 4 or self.scan_points < 4:
            raise ValueError("dataset sizes must be positive")


@dataclass
class ShapeRecord:
    shape_id: int
    category: str
    split: str
    gt_path: str
    partial_paths: list[str]
    params: dict

    def resolve(self, root: Path) -> tuple[Path, list[Path]]:
        return root / self.gt_path, [root / p for p in self.partial_paths]


@dataclass
class DatasetManifest:
    seed: int
    spec: dict
    instances: list[ShapeRecord] = field(default_factory=list)
    root: Path = field(default=Path("."), compare=False, repr=False)

    def split(self, name: str) -> list[ShapeRecord]:
        return [r for r in self.instances if r.split == name]

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in ("train", "val", "test")}

    def to_json(self) -> str:
        body = {"seed": self.seed, "spec": self.spec, "instances": [asdict(r) for r in self.instances]}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        for rec in self.instances:
            gt, partials = rec.resolve(self.root)
            if not partials:
                raise ValueError(f"shape {rec.shape_id} has no partial views")
            for p in [gt, *partials]:
                if not p.is_file():
                    raise FileNotFoundError(f"manifest references missing file {p}")


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    body = json.loads(path.read_text())
    recs = [ShapeRecord(**r) for r in body["instances"]]
    man = DatasetManifest(body["seed"], body["spec"], recs, root=path.parent)
    if validate:
        man.validate()
    return man


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/10/10 train/val/test shape counts."""
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def build_dataset(spec: DatasetSpec, out_dir, seed: int = 0) -> DatasetManifest:
    """Generate shapes, their partial views and a manifest under ``out_dir``."""
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "partial").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_sizes(spec.n_shapes)
    order = np.random.default_rng([seed, 0xD5]).permutation(spec.n_shapes)
    split_of = {}
    for rank, sid in enumerate(order):
        split_of[int(sid)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    records = []
    for sid in range(spec.n_shapes):
        kind = spec.categories[sid % len(spec.categories)]
        rng = np.random.default_rng([seed, sid])
        dims = random_params(kind, rng)
        shape_seed = int(rng.integers(2**31))
        gt = gen_primitive(kind, dims, spec.gt_points, shape_seed)
        scan = gen_primitive(kind, dims, spec.scan_points, shape_seed + 1)
        gt_rel = f"gt/shape_{sid:04d}.ply"
        write_ply(PointCloud(gt.points, normals=gt.normals), out / gt_rel)
        view_dirs, partial_rel = [], []
        for view in range(spec.views):
            for _ in range(spec.max_retries):
                vdir = rng.normal(size=3)
                vdir /= np.linalg.norm(vdir)
                partial = simulate_partial_view(scan, vdir, spec.resolution, spec.delta)
                if len(partial) >= spec.min_points:
                    break
            else:
                raise RuntimeError(f"shape {sid}: no view with >= {spec.min_points} points")
            rel = f"partial/shape_{sid:04d}_{view}.ply"
            write_ply(PointCloud(partial.points), out / rel)
            view_dirs.append([float(x) for x in vdir])
            partial_rel.append(rel)
        params = {"primitive": kind, "dims": dims, "view_dirs": view_dirs, "shape_seed": shape_seed}
        records.append(ShapeRecord(sid, kind, split_of[sid], gt_rel, partial_rel, params))
    spec_dict = asdict(spec)
    spec_dict["categories"] = list(spec.categories)
    man = DatasetManifest(seed, spec_dict, records, root=out)
    (out / "manifest.json").write_text(man.to_json())
    return man
