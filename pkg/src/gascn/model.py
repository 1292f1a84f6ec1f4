"""Graph-attention shape completion network.

The encoder fuses a graph-attention branch over the input kNN graph with a
pointwise MLP branch and max-pools both into a latent vector.  The decoder
emits a sparse coarse cloud, a unit normal and a scale per coarse point, and
densifies by placing a scaled, rotated square grid patch at every coarse point
before a pointwise residual refinement.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointCloud, as_points, meshgrid_square
from .graph import NeighborGraph, build_knn_graph, gcn_coefficients

VARIANTS = ("full", "model_a", "model_b")
MAGIC = b"GASC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes do not follow the expected layout."""


@dataclass
class ModelConfig:
    input_k: int = 20
    n_coarse: int = 64
    coarse_k: int = 5
    grid_n: int = 6
    grid_l: float = 0.1
    gat_dim: int = 64
    cart_dim: int = 64
    latent_dim: int = 256
    final_hidden: int = 128
    coarse_hidden: tuple[int, int] = (256, 512)
    local_dim: int = 64
    map_dim: int = 64
    normal_hidden: int = 128
    sigma_hidden: int = 128
    refine_hidden: int = 128
    num_gat_layers: int = 1
    variant: str = "full"
    slope: float = ad.DEFAULT_SLOPE

    def __post_init__(self):
        self.coarse_hidden = tuple(int(w) for w in self.coarse_hidden)
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_gat_layers < 1:
            raise ValueError("num_gat_layers must be >= 1")
        if len(self.coarse_hidden) != 2:
            raise ValueError("coarse_hidden needs exactly two widths")
        if self.n_coarse < self.coarse_k + 1 or self.input_k < 1 or self.grid_n < 1 or self.grid_l <= 0:
            raise ValueError("inconsistent graph or grid sizes")
        widths = ("gat_dim", "cart_dim", "latent_dim", "final_hidden", "local_dim", "map_dim", "normal_hidden",
                  "sigma_hidden", "refine_hidden")
        bad = [w for w in widths if getattr(self, w) < 1] + (["coarse_hidden"] if min(self.coarse_hidden) < 1 else [])
        if bad:
            raise ValueError(f"layer widths must be positive: {bad}")

    @property
    def n_fine(self) -> int:
        return self.n_coarse * self.grid_n**2

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """Full-size preset: 1024 coarse points, 4x4 patches, 16384 fine points."""
        base = dict(n_coarse=1024, grid_n=4, latent_dim=1024, final_hidden=512, coarse_hidden=(1024, 1024))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coarse_hidden"] = list(self.coarse_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _mlp_shapes(prefix: str, widths: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        out.append((f"{prefix}.{i}.W", (fan_in, fan_out)))
        out.append((f"{prefix}.{i}.b", (fan_out,)))
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor for ``cfg``."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if cfg.variant != "model_b":
        d_in = 3
        for layer in range(cfg.num_gat_layers):
            shapes.append((f"gat.{layer}.W", (d_in, cfg.gat_dim)))
            shapes.append((f"gat.{layer}.a", (2 * cfg.gat_dim, 1)))
            d_in = cfg.gat_dim
        feat = 2 * (cfg.gat_dim + cfg.cart_dim)
    else:
        feat = 2 * cfg.cart_dim
    shapes += _mlp_shapes("mlp_cart", [3, cfg.cart_dim, cfg.cart_dim])
    shapes += _mlp_shapes("mlp_final", [feat, cfg.final_hidden, cfg.latent_dim])
    h1, h2 = cfg.coarse_hidden
    shapes += _mlp_shapes("coarse_fc", [cfg.latent_dim, h1, h2, 3 * cfg.n_coarse])
    if cfg.variant != "model_a":
        shapes.append(("gcn_local.W", (3, cfg.local_dim)))
        shapes.append(("gcn_local.b", (cfg.local_dim,)))
        shapes += _mlp_shapes("map_coarse", [3, cfg.map_dim])
        shapes += _mlp_shapes("map_global", [cfg.latent_dim, cfg.map_dim])
        cat = cfg.local_dim + 2 * cfg.map_dim
        shapes += _mlp_shapes("normal_mlp.phi1", [cat, cfg.normal_hidden, cfg.normal_hidden])
        shapes += _mlp_shapes("normal_mlp.phi2", [cfg.normal_hidden, cfg.normal_hidden // 2, 3])
        shapes += _mlp_shapes("sigma_mlp", [cfg.normal_hidden + cat, cfg.sigma_hidden, cfg.sigma_hidden, 1])
    shapes += _mlp_shapes("refine_mlp", [6, cfg.refine_hidden, cfg.refine_hidden, 3])
    return dict(shapes)


@dataclass
class ModelParams:
    """Named learnable tensors, kept in a stable order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.items()})

    def check_finite(self) -> None:
        for t in self.tensors.values():
            t.validate()


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases; the refiner's output layer starts at zero."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    last_refine = max(n for n in shapes if n.startswith("refine_mlp.") and n.endswith(".W"))
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith(".b") or name == last_refine:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors)


# ---------------------------------------------------------------- building blocks


def mlp(x: Tensor, params: ModelParams, prefix: str, slope: float, final_activation: bool) -> Tensor:
    """Shared-weight pointwise MLP; LeakyReLU between layers."""
    return mlp_from(x, params, prefix, 0, slope, final_activation)


def mlp_from(x: Tensor, params: ModelParams, prefix: str, first: int, slope: float, final_activation: bool) -> Tensor:
    i = first
    while f"{prefix}.{i}.W" in params:
        x = ad.linear(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        last = f"{prefix}.{i + 1}.W" not in params
        if not last or final_activation:
            x = ad.leaky_relu(x, slope)
        i += 1
    return x


def gat_layer(features: Tensor, g: NeighborGraph, params: ModelParams, layer: int = 0, slope: float = ad.DEFAULT_SLOPE) -> Tensor:
    w, a = params[f"gat.{layer}.W"], params[f"gat.{layer}.a"]
    d = w.shape[1]
    m = g.n_nodes
    if features.shape[0] != m:
        raise ad.ShapeError(f"features have {features.shape[0]} rows but the graph has {m} nodes")
    dest, src = g.dest, g.src
    z = ad.matmul(features, w)
    score_dst = ad.matmul(z, ad.slice_rows(a, 0, d))
    score_src = ad.matmul(z, ad.slice_rows(a, d, 2 * d))
    e = ad.leaky_relu(ad.add(ad.gather_rows(score_dst, dest), ad.gather_rows(score_src, src)), slope)
    alpha = ad.segment_softmax(e, dest, m)
    return ad.leaky_relu(ad.edge_aggregate(alpha, z, src, dest, m), slope)


def _row(v: Tensor) -> Tensor:
    return ad.reshape(v, (1, -1))


def encode(points, params: ModelParams, cfg: ModelConfig, graph: NeighborGraph | None = None) -> Tensor:
    """Latent vector of length ``latent_dim`` for a point cloud."""
    pts = as_points(points)
    m = pts.shape[0]
    if m < cfg.input_k + 1:
        raise ValueError(f"input has {m} points; at least {cfg.input_k + 1} are required")
    x = Tensor(pts)
    f_cart = mlp(x, params, "mlp_cart", cfg.slope, final_activation=True)
    g_cart = _row(ad.column_max_pool(f_cart))
    if cfg.variant == "model_b":
        f_bar, g_bar = f_cart, g_cart
    else:
        graph = graph if graph is not None else build_knn_graph(pts, cfg.input_k)
        h = x
        for layer in range(cfg.num_gat_layers):
            h = gat_layer(h, graph, params, layer, cfg.slope)
        g_graph = _row(ad.column_max_pool(h))
        f_bar = ad.concat_cols([h, f_cart])
        g_bar = ad.concat_cols([g_graph, g_cart])
    # First layer of the final MLP on [f_bar | g_bar per row], evaluated blockwise:
    # the broadcast block contributes the same row to every point.
    w0, b0 = params["mlp_final.0.W"], params["mlp_final.0.b"]
    d = f_bar.shape[1]
    h = ad.matmul(f_bar, ad.slice_rows(w0, 0, d))
    h = ad.add(h, ad.linear(g_bar, ad.slice_rows(w0, d, w0.shape[0]), b0))
    h = ad.leaky_relu(h, cfg.slope)
    return ad.column_max_pool(mlp_from(h, params, "mlp_final", 1, cfg.slope, final_activation=False))


def decode_coarse(g_final: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    out = mlp(_row(g_final), params, "coarse_fc", cfg.slope, final_activation=False)
    return ad.reshape(out, (cfg.n_coarse, 3))


class NormalDecoding(NamedTuple):
    normals: Tensor
    n_imd: Tensor
    c_local: Tensor
    c_map: Tensor
    g_map: Tensor


def decode_normals(coarse: Tensor, g_final: Tensor, params: ModelParams, cfg: ModelConfig) -> NormalDecoding:
    n = coarse.shape[0]
    cg = build_knn_graph(coarse.data, cfg.coarse_k)
    weights = Tensor(gcn_coefficients(cg))
    xw = ad.matmul(coarse, params["gcn_local.W"])
    agg = ad.segment_weighted_sum(weights, ad.gather_rows(xw, cg.src), cg.dest, n)
    c_local = ad.leaky_relu(ad.add(agg, params["gcn_local.b"]), cfg.slope)
    c_map = mlp(coarse, params, "map_coarse", cfg.slope, final_activation=True)
    g_map = ad.repeat_rows(mlp(_row(g_final), params, "map_global", cfg.slope, final_activation=True), n)
    n_imd = mlp(ad.concat_cols([c_local, c_map, g_map]), params, "normal_mlp.phi1", cfg.slope, final_activation=True)
    raw = mlp(n_imd, params, "normal_mlp.phi2", cfg.slope, final_activation=False)
    return NormalDecoding(ad.l2_normalize_rows(raw), n_imd, c_local, c_map, g_map)


def decode_sigma(n_imd: Tensor, c_local: Tensor, c_map: Tensor, g_map: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Positive per-point patch scale, predicted in log space."""
    log_sigma = mlp(ad.concat_cols([n_imd, c_local, c_map, g_map]), params, "sigma_mlp", cfg.slope, final_activation=False)
    return ad.reshape(ad.exp_elementwise(log_sigma), (n_imd.shape[0],))


def patch_axes(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images of the x and y axes under the rotation taking +z to each normal.

    Uses the closed form of the axis-angle rotation about ``z x n``; rows whose
    normal is -z get a half turn about x.  Returns ``(u, w, antipodal_mask)``.
    """
    nx, ny, nz = normals[:, 0], normals[:, 1], normals[:, 2]
    antipodal = (nx * nx + ny * ny < 1e-16) & (nz < 0)
    d = np.where(antipodal, 1.0, 1.0 + nz)
    u = np.stack([1.0 - nx * nx / d, -nx * ny / d, -nx], axis=1)
    w = np.stack([-nx * ny / d, 1.0 - ny * ny / d, -ny], axis=1)
    u[antipodal] = (1.0, 0.0, 0.0)
    w[antipodal] = (0.0, -1.0, 0.0)
    return u, w, antipodal


def densify(coarse: Tensor, normals: Tensor, sigma: Tensor, cfg: ModelConfig) -> Tensor:
    """Place a ``grid_n x grid_n`` patch, scaled by sigma and tilted onto the normal, at each coarse point."""
    p, nrm, s = coarse.data, normals.data, sigma.data.reshape(-1)
    n = p.shape[0]
    if nrm.shape != (n, 3) or s.shape != (n,):
        raise ad.ShapeError("coarse, normals and sigma must be row-aligned")
    if np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-6:
        raise ValueError("densify needs unit normals")
    if np.any(s < 0):
        raise ValueError("densify needs non-negative scales")
    grid = meshgrid_square(cfg.grid_n, cfg.grid_l)
    gx, gy = grid[:, 0], grid[:, 1]
    u, w, antipodal = patch_axes(nrm)
    offsets = s[:, None, None] * (gx[None, :, None] * u[:, None, :] + gy[None, :, None] * w[:, None, :])
    out = (p[:, None, :] + offsets).reshape(-1, 3)

    def _back(g):
        g = g.reshape(n, gx.size, 3)
        gp = g.sum(axis=1)
        sx = np.einsum("j,ijk->ik", gx, g)
        sy = np.einsum("j,ijk->ik", gy, g)
        gs = np.einsum("ik,ik->i", sx, u) + np.einsum("ik,ik->i", sy, w)
        gu, gw = s[:, None] * sx, s[:, None] * sy
        nx, ny, nz = nrm[:, 0], nrm[:, 1], nrm[:, 2]
        d = np.where(antipodal, 1.0, 1.0 + nz)
        gn = np.zeros_like(nrm)
        # d u / d n and d w / d n of the closed-form axes.
        gn[:, 0] = gu[:, 0] * (-2 * nx / d) + gu[:, 1] * (-ny / d) - gu[:, 2] + gw[:, 0] * (-ny / d)
        gn[:, 1] = gu[:, 1] * (-nx / d) + gw[:, 0] * (-nx / d) + gw[:, 1] * (-2 * ny / d) - gw[:, 2]
        gn[:, 2] = (gu[:, 0] * nx * nx + (gu[:, 1] + gw[:, 0]) * nx * ny + gw[:, 1] * ny * ny) / (d * d)
        gn[antipodal] = 0.0
        return gp, gn, gs.reshape(sigma.shape)

    return ad.record((coarse, normals, sigma), out, _back)


def fixed_grid(coarse: Tensor, cfg: ModelConfig) -> Tensor:
    """Unscaled, untilted patches: the ablation without normals or scales."""
    grid = meshgrid_square(cfg.grid_n, cfg.grid_l)
    parent = ad.gather_rows(coarse, np.repeat(np.arange(coarse.shape[0]), grid.shape[0]))
    return ad.add(parent, Tensor(np.tile(grid, (coarse.shape[0], 1))))


def refine(dense: Tensor, coarse: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Residual pointwise correction; each dense point sees its parent coarse point."""
    per_patch = dense.shape[0] // coarse.shape[0]
    parent = ad.gather_rows(coarse, np.repeat(np.arange(coarse.shape[0]), per_patch))
    offset = mlp(ad.concat_cols([dense, parent]), params, "refine_mlp", cfg.slope, final_activation=False)
    return ad.add(dense, offset)


@dataclass
class CompletionOutput:
    latent: Tensor
    coarse: Tensor
    normals: Tensor | None
    sigma: Tensor | None
    dense: Tensor
    fine: Tensor

    def coarse_cloud(self) -> PointCloud:
        normals = None if self.normals is None else self.normals.data
        return PointCloud(self.coarse.data.copy(), normals=normals)

    def dense_cloud(self) -> PointCloud:
        return PointCloud(self.dense.data.copy())

    def fine_cloud(self) -> PointCloud:
        return PointCloud(self.fine.data.copy())


def forward(points, params: ModelParams, cfg: ModelConfig, graph: NeighborGraph | None = None) -> CompletionOutput:
    g_final = encode(points, params, cfg, graph)
    coarse = decode_coarse(g_final, params, cfg)
    if not np.all(np.isfinite(coarse.data)):
        raise ad.NonFiniteError("coarse decoder produced non-finite points")
    if cfg.variant == "model_a":
        normals = sigma = None
        dense = fixed_grid(coarse, cfg)
    else:
        nd = decode_normals(coarse, g_final, params, cfg)
        sigma = decode_sigma(nd.n_imd, nd.c_local, nd.c_map, nd.g_map, params, cfg)
        normals = nd.normals
        dense = densify(coarse, normals, sigma, cfg)
    fine = refine(dense, coarse, cfg, params)
    return CompletionOutput(g_final, coarse, normals, sigma, dense, fine)


# ------------------------------------------------------------------ checkpoint


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_params(params: ModelParams, path, cfg: ModelConfig | None = None) -> None:
    """Write the binary checkpoint and, when ``cfg`` is given, its JSON sidecar."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    if cfg is not None:
        _sidecar(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, cfg: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint; with ``cfg`` every tensor's shape is checked against it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a GASC checkpoint")
    version, count = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    if cfg is not None:
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in tensors:
                raise ad.ShapeError(f"checkpoint is missing tensor {name!r}")
            if tensors[name].shape != shape:
                raise ad.ShapeError(f"tensor {name!r} has shape {tensors[name].shape}, config expects {shape}")
        extra = set(tensors) - set(expected)
        if extra:
            raise ad.ShapeError(f"checkpoint has tensors not in the config: {sorted(extra)}")
    return ModelParams(tensors)


def load_config(path) -> ModelConfig:
    """Read the JSON sidecar written next to a checkpoint."""
    return ModelConfig.from_dict(json.loads(_sidecar(Path(path)).read_text()))
