"""Cascaded upsampling network: per-stage feature extraction, expansion and reconstruction."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import knn_indices
from .tensor import (
    DimensionError,
    Tensor,
    concat_channels,
    deconv1d_points,
    duplicate_points,
    gather_rows,
    linear,
    max_pool_points,
    relu,
    reshape,
    softmax_rows,
    tsum,
)

EXTRACTOR_KINDS = ("transformer", "mlp_only", "dense_gcn_stub")

# Channel widths of one stage. The attention width is the internal
# feature-transformation width of the point transformer layer.
POINT_MLP = (3, 64, 128)
FUSE_MLP = (256, 128, 128)
ATTN_WIDTH = 64
FEAT = 128
EXPAND_MLP = 32
EXPAND_FUSE = (256, 256, 128)
OFFSET_MLP = (128, 64, 3)

CHANNEL_PLAN = (
    "point=3-64-128;fuse=256-128-128;qkv=128-64;pos=3-64-64;attn=64-64;out=64-128;"
    "expand=128-32;deconv=32-128;expand_fuse=256-256-128;offset=128-64-3"
)


@dataclass(frozen=True)
class StageConfig:
    r: int = 2
    k_attention: int = 16
    feature_extractor_kind: str = "transformer"
    use_residual: bool = True
    use_position_encoding: bool = True

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise ValueError(f"stage rate must be a positive integer, got {self.r}")
        if self.k_attention < 1:
            raise ValueError(f"k_attention must be positive, got {self.k_attention}")
        if self.feature_extractor_kind == "dense_gcn_stub":
            raise NotImplementedError(
                "the DenseGCN feature extractor is only a configuration placeholder; "
                "use 'transformer' or 'mlp_only'")
        if self.feature_extractor_kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown feature extractor {self.feature_extractor_kind!r}")


def default_stage_configs(num_stages: int = 3, **kw) -> list[StageConfig]:
    """Stage rates for an overall x4 cascade: (2, 2), (2, 2, 1) or (2, 2, 1, 1)."""
    rates = {2: (2, 2), 3: (2, 2, 1), 4: (2, 2, 1, 1)}
    if num_stages not in rates:
        raise ValueError(f"supported stage counts are 2, 3 and 4, got {num_stages}")
    return [StageConfig(r=r, **kw) for r in rates[num_stages]]


@dataclass
class StageParams:
    config: StageConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())


@dataclass
class NetworkParams:
    stages: list[StageParams]

    @property
    def configs(self) -> list[StageConfig]:
        return [s.config for s in self.stages]

    @property
    def rate(self) -> int:
        return int(np.prod([c.r for c in self.configs]))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"stage{i}.{name}", t)
                for i, s in enumerate(self.stages) for name, t in s.tensors.items()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def copy(self) -> "NetworkParams":
        return NetworkParams([
            StageParams(s.config, {n: Tensor(t.data.copy(), requires_grad=True, name=t.name)
                                   for n, t in s.tensors.items()})
            for s in self.stages])


def layer_shapes(config: StageConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every learnable tensor of one stage with its shape, in canonical order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def lin(name, cin, cout, bias=True):
        shapes.append((f"{name}.w", (cin, cout)))
        if bias:
            shapes.append((f"{name}.b", (cout,)))

    lin("fe.mlp1", POINT_MLP[0], POINT_MLP[1])
    lin("fe.mlp2", POINT_MLP[1], POINT_MLP[2])
    lin("fe.fuse1", FUSE_MLP[0], FUSE_MLP[1])
    lin("fe.fuse2", FUSE_MLP[1], FUSE_MLP[2])
    if config.feature_extractor_kind == "transformer":
        # Biases on query, key and attention logits would cancel inside
        # q - k and the neighbour softmax, so those layers have none.
        lin("pt.q", FEAT, ATTN_WIDTH, bias=False)
        lin("pt.k", FEAT, ATTN_WIDTH, bias=False)
        lin("pt.v", FEAT, ATTN_WIDTH)
        if config.use_position_encoding:
            lin("pt.pos1", 3, ATTN_WIDTH)
            lin("pt.pos2", ATTN_WIDTH, ATTN_WIDTH)
        lin("pt.attn", ATTN_WIDTH, ATTN_WIDTH, bias=False)
        lin("pt.out", ATTN_WIDTH, FEAT)
    lin("ex.mlp", FEAT, EXPAND_MLP)
    shapes.append(("ex.deconv.w", (config.r, EXPAND_MLP, FEAT)))
    shapes.append(("ex.deconv.b", (FEAT,)))
    lin("ex.fuse1", EXPAND_FUSE[0], EXPAND_FUSE[1])
    lin("ex.fuse2", EXPAND_FUSE[1], EXPAND_FUSE[2])
    lin("rc.mlp1", OFFSET_MLP[0], OFFSET_MLP[1])
    lin("rc.mlp2", OFFSET_MLP[1], OFFSET_MLP[2])
    return shapes


def init_stage(config: StageConfig, rng: np.random.Generator,
               zero_attention_out: bool = True) -> StageParams:
    """Fan-in scaled uniform init; the attention output projection starts at zero."""
    shapes = dict(layer_shapes(config))
    tensors = {}
    for name, shape in shapes.items():
        layer = name.rsplit(".", 1)[0]
        if layer == "pt.out" and zero_attention_out:
            data = np.zeros(shape)
        else:
            fan_in = shapes[layer + ".w"][-2]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return StageParams(config, tensors)


def init_network(configs: Sequence[StageConfig] | None = None, seed: int = 0,
                 zero_attention_out: bool = True) -> NetworkParams:
    configs = list(configs) if configs is not None else default_stage_configs(3)
    rng = np.random.default_rng(seed)
    return NetworkParams([init_stage(c, rng, zero_attention_out) for c in configs])


def zero_offset_heads(net: NetworkParams) -> NetworkParams:
    """Zero the final offset layer of every stage in place."""
    for s in net.stages:
        s["rc.mlp2.w"].data[...] = 0.0
        s["rc.mlp2.b"].data[...] = 0.0
    return net


def count_parameters(net: NetworkParams | StageParams) -> int:
    return int(sum(t.size for t in net.parameters()))


def parameter_bytes(net: NetworkParams | StageParams) -> int:
    """Storage of the float64 parameters, excluding checkpoint headers."""
    return 8 * count_parameters(net)


def _mlp(x: Tensor, p: StageParams, name: str, activate: bool = True) -> Tensor:
    y = linear(x, p[f"{name}.w"], p.tensors.get(f"{name}.b"))
    return relu(y) if activate else y


def point_transformer(x: Tensor, points: Tensor, p: StageParams, config: StageConfig) -> Tensor:
    """Local vector attention over the k nearest neighbours in coordinate space.

    Returns the attended features projected back to the input width; the
    caller adds them to ``x``.
    """
    n, k = x.shape[0], config.k_attention
    idx = knn_indices(points.data, points.data, k)
    q = _mlp(x, p, "pt.q", activate=False)
    keys = gather_rows(_mlp(x, p, "pt.k", activate=False), idx)
    vals = gather_rows(_mlp(x, p, "pt.v", activate=False), idx)
    logits = reshape(q, (n, 1, ATTN_WIDTH)) - keys
    if config.use_position_encoding:
        rel = reshape(points, (n, 1, 3)) - gather_rows(points, idx)
        delta = _mlp(_mlp(rel, p, "pt.pos1"), p, "pt.pos2", activate=False)
        logits = logits + delta
        vals = vals + delta
    weights = softmax_rows(_mlp(logits, p, "pt.attn", activate=False), axis=1)
    attended = tsum(weights * vals, axis=1)
    return _mlp(attended, p, "pt.out", activate=False)


def extract_features(points: Tensor, p: StageParams, config: StageConfig | None = None,
                     global_override: np.ndarray | None = None) -> Tensor:
    """Per-point features of width 128 combining global and local context.

    ``global_override`` replaces the max-pooled global vector with a fixed
    one; it exists for locality experiments.
    """
    config = config or p.config
    n = points.shape[0]
    if n < config.k_attention:
        raise ValueError(f"extract_features: {n} points but k_attention={config.k_attention}")
    h = _mlp(_mlp(points, p, "fe.mlp1"), p, "fe.mlp2")
    g = max_pool_points(h) if global_override is None else Tensor(global_override)
    g = duplicate_points(reshape(g, (1, FEAT)), n)
    x = _mlp(_mlp(concat_channels(h, g), p, "fe.fuse1"), p, "fe.fuse2")
    if config.feature_extractor_kind == "transformer":
        x = x + point_transformer(x, points, p, config)
    return x


def expand_features(features: Tensor, p: StageParams, r: int) -> Tensor:
    dup = duplicate_points(features, r)
    learned = deconv1d_points(_mlp(features, p, "ex.mlp"), p["ex.deconv.w"], p["ex.deconv.b"], r)
    x = concat_channels(dup, learned)
    return _mlp(_mlp(x, p, "ex.fuse1"), p, "ex.fuse2")


def offset_head(expanded: Tensor, p: StageParams) -> Tensor:
    return _mlp(_mlp(expanded, p, "rc.mlp1"), p, "rc.mlp2", activate=False)


def reconstruct_coordinates(expanded: Tensor, input_points: Tensor, p: StageParams, r: int,
                            use_residual: bool = True) -> Tensor:
    if expanded.shape[0] != r * input_points.shape[0]:
        raise DimensionError(
            f"reconstruct_coordinates: {expanded.shape[0]} expanded rows for "
            f"{input_points.shape[0]} input points at r={r}")
    offsets = offset_head(expanded, p)
    if not use_residual:
        return offsets
    return offsets + duplicate_points(input_points, r)


def stage_forward(points: Tensor, p: StageParams, config: StageConfig | None = None) -> Tensor:
    config = config or p.config
    feats = extract_features(points, p, config)
    expanded = expand_features(feats, p, config.r)
    return reconstruct_coordinates(expanded, points, p, config.r, config.use_residual)


def cascade_forward(points, net: NetworkParams, use_refiner: bool = True) -> list[Tensor]:
    """Run every stage in turn and return all intermediate outputs.

    With ``use_refiner=False`` a trailing rate-1 stage is skipped.
    """
    x = points if isinstance(points, Tensor) else Tensor(points)
    stages = net.stages
    if not use_refiner and stages and stages[-1].config.r == 1:
        stages = stages[:-1]
    outputs = []
    for s in stages:
        x = stage_forward(x, s)
        outputs.append(x)
    return outputs


# ----------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CRPUNET\0"
#   uint32    format version
#   uint32    plan length, then UTF-8 plan text (channel widths + stage configs)
#   uint32    tensor count
#   per tensor: uint32 name length, UTF-8 name, uint32 rank, rank x uint32
#               extents, prod(extents) x float64 values

MAGIC = b"CRPUNET\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _plan_text(configs: Sequence[StageConfig]) -> str:
    lines = [f"widths={CHANNEL_PLAN}"]
    for c in configs:
        lines.append(
            f"stage=r{c.r},{c.feature_extractor_kind},residual={int(c.use_residual)},"
            f"posenc={int(c.use_position_encoding)},k={c.k_attention}")
    return "\n".join(lines)


def _parse_plan(text: str) -> list[StageConfig]:
    lines = text.split("\n")
    if not lines or lines[0] != f"widths={CHANNEL_PLAN}":
        raise CheckpointError(f"checkpoint channel plan {lines[0]!r} does not match this build")
    configs = []
    for line in lines[1:]:
        r, kind, res, pos, k = line.removeprefix("stage=").split(",")
        configs.append(StageConfig(
            r=int(r[1:]), feature_extractor_kind=kind,
            use_residual=res.endswith("1"), use_position_encoding=pos.endswith("1"),
            k_attention=int(k.split("=")[1])))
    return configs


def save_checkpoint(net: NetworkParams, path) -> None:
    plan = _plan_text(net.configs).encode("utf-8")
    named = net.named_parameters()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(plan)), plan,
              struct.pack("<I", len(named))]
    for name, t in named:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        chunks.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: Sequence[StageConfig] | None = None) -> NetworkParams:
    """Read a checkpoint, checking the channel plan and (optionally) the stage configs."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a cascade checkpoint (bad magic)")
    try:
        return _decode(buf, path, expected)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _decode(buf: bytes, path, expected) -> NetworkParams:
    off = 8
    version, plan_len = struct.unpack_from("<II", buf, off)
    off += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    configs = _parse_plan(buf[off:off + plan_len].decode("utf-8"))
    off += plan_len
    if expected is not None and list(expected) != configs:
        raise CheckpointError(f"{path}: stage configuration {configs} differs from requested {list(expected)}")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if off + 8 * size > len(buf):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    stages = []
    for i, c in enumerate(configs):
        params = {}
        for name, shape in layer_shapes(c):
            key = f"stage{i}.{name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if tensors[key].shape != shape:
                raise CheckpointError(f"{path}: tensor {key} has shape {tensors[key].shape}, expected {shape}")
            params[name] = Tensor(tensors[key], requires_grad=True, name=name)
        stages.append(StageParams(c, params))
    return NetworkParams(stages)


def with_configs(net: NetworkParams, **changes) -> NetworkParams:
    """Copy of ``net`` sharing tensors but with stage-config fields replaced."""
    return NetworkParams([StageParams(replace(s.config, **changes), s.tensors) for s in net.stages])
