"""High-resolution multi-branch 3-D FCN: builder, forward pass, checkpoints.

The network keeps parallel branches of feature maps at 1/2, 1/4, ... of the
input resolution.  A strided stem halves the input and feeds two bottleneck
blocks; transitions add one lower-resolution branch per stage; each stage
runs residual blocks per branch in exchange modules, with a dense fusion
layer (every branch receives transformed contributions from every other
branch, summed then activated) after each module.  The head concatenates
all branches at 1/2 resolution, applies two 1x1x1 convolutions (the only
biased ones), a channel softmax, and trilinear upsampling back to the
input dims, yielding a per-voxel probability map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .halfprec import PrecisionPolicy
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv3d,
    conv_output_extent,
    instance_norm,
    relu,
    softmax_channels,
    trilinear_resize,
)

CHECKPOINT_MAGIC = b"VXCKPT1\n"

MIN_INPUT_EXTENT = 8


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of the architecture.

    ``branch_channels`` lists the feature maps kept per resolution level;
    stage k (1-based) runs k+1 branches.  ``norm_momentum`` is accepted for
    config compatibility but has no effect: instance norm keeps no running
    statistics.
    """

    num_classes: int = 55
    in_channels: int = 1
    stem_channels: int = 32
    bottleneck_mid_channels: int = 16
    bottleneck_expansion: int = 4
    branch_channels: tuple = (16, 32, 64)
    stage_modules: tuple = (1, 2)
    blocks_per_module: int = 3
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.bottleneck_mid_channels < 1 or self.bottleneck_expansion < 1:
            raise ConfigError("bottleneck parameters must be >= 1")
        if len(self.branch_channels) < 2:
            raise ConfigError("need at least two branches")
        if any(c < 1 for c in self.branch_channels):
            raise ConfigError("branch channels must be >= 1")
        if len(self.stage_modules) != len(self.branch_channels) - 1:
            raise ConfigError(
                f"{len(self.branch_channels)} branches require "
                f"{len(self.branch_channels) - 1} stage entries, "
                f"got {len(self.stage_modules)}"
            )
        if any(m < 1 for m in self.stage_modules):
            raise ConfigError("every stage needs at least one module")
        if self.blocks_per_module < 1:
            raise ConfigError("blocks_per_module must be >= 1")

    @property
    def stem_out_channels(self) -> int:
        return self.bottleneck_mid_channels * self.bottleneck_expansion

    def to_json(self) -> str:
        d = asdict(self)
        d["branch_channels"] = list(d["branch_channels"])
        d["stage_modules"] = list(d["stage_modules"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["branch_channels"] = tuple(d["branch_channels"])
        d["stage_modules"] = tuple(d["stage_modules"])
        return cls(**d)


class _Builder:
    def __init__(self, seed: int):
        self.params: dict[str, Tensor] = {}
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def _register(self, name: str, arr: np.ndarray) -> str:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(arr, requires_grad=True)
        return name

    def conv_weight(self, name, cout, cin, k) -> str:
        fan_in = cin * k * k * k
        std = (2.0 / fan_in) ** 0.5
        arr = self.rng.normal(0.0, std, size=(cout, cin, k, k, k)).astype(np.float32)
        return self._register(name, arr)

    def zeros(self, name, shape) -> str:
        return self._register(name, np.zeros(shape, dtype=np.float32))

    def ones(self, name, shape) -> str:
        return self._register(name, np.ones(shape, dtype=np.float32))


class _Ctx:
    __slots__ = ("params", "policy", "eps")

    def __init__(self, params, policy, eps):
        self.params = params
        self.policy = policy
        self.eps = eps


class _Conv:
    def __init__(self, b: _Builder, name, cin, cout, k, stride, padding, bias=False):
        self.wname = b.conv_weight(f"{name}.weight", cout, cin, k)
        self.bname = b.zeros(f"{name}.bias", (cout,)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x, ctx: _Ctx):
        w = ctx.policy.cast_weight(ctx.params[self.wname])
        xq = ctx.policy.cast_activation(x)
        b = ctx.params[self.bname] if self.bname else None
        out = conv3d(xq, w, b, stride=self.stride, padding=self.padding)
        return ctx.policy.cast_conv_output(out)


class _Norm:
    def __init__(self, b: _Builder, name, channels):
        self.gname = b.ones(f"{name}.gamma", (channels,))
        self.bname = b.zeros(f"{name}.beta", (channels,))

    def __call__(self, x, ctx: _Ctx):
        out = instance_norm(x, ctx.params[self.gname], ctx.params[self.bname], eps=ctx.eps)
        return ctx.policy.cast_norm_output(out)


class _ConvNorm:
    def __init__(self, b, name, cin, cout, k, stride, padding, act, bias=False):
        self.conv = _Conv(b, f"{name}.conv", cin, cout, k, stride, padding, bias=bias)
        self.norm = _Norm(b, f"{name}.norm", cout)
        self.act = act

    def __call__(self, x, ctx):
        out = self.norm(self.conv(x, ctx), ctx)
        return relu(out) if self.act else out


class _BasicBlock:
    """[Conv(3,1,1) | Norm | ReLU | Conv(3,1,1) | Norm] + residual, then ReLU."""

    def __init__(self, b, name, cin, cout):
        self.c1 = _ConvNorm(b, f"{name}.c1", cin, cout, 3, 1, 1, act=True)
        self.c2 = _ConvNorm(b, f"{name}.c2", cout, cout, 3, 1, 1, act=False)
        self.shortcut = (
            None if cin == cout else _ConvNorm(b, f"{name}.down", cin, cout, 1, 1, 0, act=False)
        )

    def __call__(self, x, ctx):
        out = self.c2(self.c1(x, ctx), ctx)
        res = x if self.shortcut is None else self.shortcut(x, ctx)
        return relu(add(out, res))


class _BottleneckBlock:
    """1x1 reduce, 3x3, 1x1 expand, residual through a consistent path."""

    def __init__(self, b, name, cin, mid, expansion):
        cout = mid * expansion
        self.c1 = _ConvNorm(b, f"{name}.c1", cin, mid, 1, 1, 0, act=True)
        self.c2 = _ConvNorm(b, f"{name}.c2", mid, mid, 3, 1, 1, act=True)
        self.c3 = _ConvNorm(b, f"{name}.c3", mid, cout, 1, 1, 0, act=False)
        self.shortcut = (
            None if cin == cout else _ConvNorm(b, f"{name}.down", cin, cout, 1, 1, 0, act=False)
        )
        self.out_channels = cout

    def __call__(self, x, ctx):
        out = self.c3(self.c2(self.c1(x, ctx), ctx), ctx)
        res = x if self.shortcut is None else self.shortcut(x, ctx)
        return relu(add(out, res))


class _Fusion:
    """Dense cross-resolution exchange for one stage.

    Contributions into branch t: identity from itself; from a higher
    resolution branch s < t, (t - s) strided Conv(3,2,1)|Norm steps (the
    intermediate steps keep the source width, the last maps to the target
    width, no inner ReLU); from a lower resolution branch s > t, a
    Conv(1,1,0)|Norm then trilinear upsampling to the target dims.  Each
    branch sums its contributions and applies one ReLU.
    """

    def __init__(self, b, name, channels):
        self.n = len(channels)
        self.paths = {}
        for t in range(self.n):
            for s in range(self.n):
                if s == t:
                    continue
                if s < t:
                    steps = []
                    for r in range(t - s):
                        cin = channels[s]
                        cout = channels[t] if r == t - s - 1 else channels[s]
                        steps.append(
                            _ConvNorm(
                                b, f"{name}.down{s}to{t}.{r}", cin, cout, 3, 2, 1, act=False
                            )
                        )
                    self.paths[(s, t)] = ("down", steps)
                else:
                    self.paths[(s, t)] = (
                        "up",
                        _ConvNorm(b, f"{name}.up{s}to{t}", channels[s], channels[t], 1, 1, 0, act=False),
                    )

    def __call__(self, branches, ctx):
        fused = []
        for t in range(self.n):
            acc = branches[t]
            for s in range(self.n):
                if s == t:
                    continue
                kind, path = self.paths[(s, t)]
                if kind == "down":
                    contrib = branches[s]
                    for step in path:
                        contrib = step(contrib, ctx)
                else:
                    contrib = path(branches[s], ctx)
                    contrib = trilinear_resize(contrib, branches[t].data.shape[2:])
                acc = add(acc, contrib)
            fused.append(relu(acc))
        return fused


class Network:
    """Built parameter set plus the block graph realizing the architecture."""

    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        b = _Builder(seed)
        cfg = config
        chs = cfg.branch_channels
        mid = cfg.bottleneck_mid_channels
        stem_out = cfg.stem_out_channels

        self.stem_conv = _ConvNorm(b, "stem.conv1", cfg.in_channels, cfg.stem_channels, 3, 2, 1, act=True)
        self.stem_blocks = [
            _BottleneckBlock(b, "stem.block1", cfg.stem_channels, mid, cfg.bottleneck_expansion),
            _BottleneckBlock(b, "stem.block2", stem_out, mid, cfg.bottleneck_expansion),
        ]

        # Transition i brings the branch set from i to i+1 branches: a
        # 3x3x3 conv per existing branch plus a strided conv opening the
        # new branch from the previous lowest resolution.
        self.transitions = []
        self.stages = []  # per stage: (modules, fusions)
        prev_chs = [stem_out]
        for stage_idx, n_modules in enumerate(cfg.stage_modules):
            n_branches = stage_idx + 2
            cur_chs = list(chs[:n_branches])
            trans = []
            for i in range(n_branches - 1):
                trans.append(
                    _ConvNorm(
                        b,
                        f"transition{stage_idx + 1}.branch{i + 1}",
                        prev_chs[i],
                        cur_chs[i],
                        3,
                        1,
                        1,
                        act=True,
                    )
                )
            trans.append(
                _ConvNorm(
                    b,
                    f"transition{stage_idx + 1}.branch{n_branches}",
                    prev_chs[-1],
                    cur_chs[-1],
                    3,
                    2,
                    1,
                    act=True,
                )
            )
            self.transitions.append(trans)

            modules = []
            fusions = []
            for m in range(n_modules):
                blocks = []
                for br in range(n_branches):
                    chain = [
                        _BasicBlock(
                            b,
                            f"stage{stage_idx + 1}.module{m + 1}.branch{br + 1}.block{k + 1}",
                            cur_chs[br],
                            cur_chs[br],
                        )
                        for k in range(cfg.blocks_per_module)
                    ]
                    blocks.append(chain)
                modules.append(blocks)
                fusions.append(_Fusion(b, f"stage{stage_idx + 1}.fuse{m + 1}", cur_chs))
            self.stages.append((modules, fusions))
            prev_chs = cur_chs

        concat_ch = sum(chs)
        self.head1 = _ConvNorm(b, "regression.c1", concat_ch, concat_ch, 1, 1, 0, act=True, bias=True)
        self.head2 = _Conv(b, "regression.c2.conv", concat_ch, cfg.num_classes, 1, 1, 0, bias=True)

        self.params = b.params
        self.last_branch_dims = None

    # -- forward ----------------------------------------------------------

    def forward(self, x: Tensor, policy: PrecisionPolicy | None = None, params=None) -> Tensor:
        """Run the full network, returning a (N, L, D, H, W) probability map.

        ``params`` may supply an alternative parameter map (half working
        copies under the o2/o3 policies); names must match the built set.
        """
        policy = policy or PrecisionPolicy()
        ctx = _Ctx(params or self.params, policy, self.config.norm_eps)
        n, c, d, h, w = x.data.shape
        if c != self.config.in_channels:
            raise ShapeError(
                f"input has {c} channels, network expects {self.config.in_channels}"
            )
        for extent in (d, h, w):
            if extent < MIN_INPUT_EXTENT:
                raise ShapeError(
                    f"input extent {extent} < {MIN_INPUT_EXTENT}: the 1/8-resolution "
                    f"branch (branch 3) would be degenerate"
                )

        x = policy.cast_network_input(x)
        t = self.stem_conv(x, ctx)
        for blk in self.stem_blocks:
            t = blk(t, ctx)

        branches = [t]
        branch_dims = []
        for (trans, (modules, fusions)) in zip(self.transitions, self.stages):
            new_branches = []
            for i, layer in enumerate(trans[:-1]):
                new_branches.append(layer(branches[i], ctx))
            new_branches.append(trans[-1](branches[-1], ctx))
            branches = new_branches
            for blocks, fusion in zip(modules, fusions):
                staged = []
                for br, chain in enumerate(blocks):
                    cur = branches[br]
                    for blk in chain:
                        cur = blk(cur, ctx)
                    staged.append(cur)
                branches = fusion(staged, ctx)
            branch_dims = [tuple(br.data.shape[2:]) for br in branches]

        target = branches[0].data.shape[2:]
        ups = [branches[0]]
        for br in branches[1:]:
            ups.append(trilinear_resize(br, target))
        merged = concat_channels(ups)

        logits = self.head2(self.head1(merged, ctx), ctx)
        probs = policy.cast_softmax_output(softmax_channels(logits))
        out = trilinear_resize(probs, (d, h, w))
        self.last_branch_dims = branch_dims
        return out

    # -- introspection ----------------------------------------------------

    def branch_dims_for(self, dims):
        """Analytic spatial dims of every branch for a given input size."""
        dims = tuple(int(v) for v in dims)
        levels = []
        cur = tuple(conv_output_extent(e, 3, 2, 1) for e in dims)
        levels.append(cur)
        for _ in range(len(self.config.branch_channels) - 1):
            cur = tuple(conv_output_extent(e, 3, 2, 1) for e in cur)
            levels.append(cur)
        return levels

    def describe(self):
        """Layer listing rows: (component, scales, channels)."""
        cfg = self.config
        chs = cfg.branch_channels
        rows = [
            ("input", ["1"], [cfg.in_channels]),
            ("stem", ["1/2"], [cfg.stem_out_channels]),
        ]
        for stage_idx, n_modules in enumerate(cfg.stage_modules):
            nb = stage_idx + 2
            scales = [f"1/{2 ** (i + 1)}" for i in range(nb)]
            cur = list(chs[:nb])
            rows.append((f"transition{stage_idx + 1}", scales, cur))
            for m in range(n_modules):
                rows.append((f"stage{stage_idx + 1}.module{m + 1}", scales, cur))
                rows.append((f"stage{stage_idx + 1}.fusion{m + 1}", scales, cur))
        rows.append(("concatenation", ["1/2"], [sum(chs)]))
        rows.append(("regression", ["1"], [cfg.num_classes]))
        return rows


def build_network(config: NetworkConfig, seed: int) -> Network:
    """Construct the network with seed-deterministic initialization.

    Convolution weights use fan-in scaled normal draws, norms start at
    gamma=1/beta=0, biases (regression head only) at zero.
    """
    return Network(config, seed)


def forward(net: Network, x: Tensor, policy: PrecisionPolicy | None = None) -> Tensor:
    return net.forward(x, policy=policy)


def count_parameters(net: Network) -> int:
    """Total scalar parameters, including norm affines and head biases."""
    return sum(t.data.size for t in net.params.values())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    cfg_blob = net.config.to_json().encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(cfg_blob)))
            fh.write(cfg_blob)
            fh.write(struct.pack("<I", len(net.params)))
            for name, t in net.params.items():
                nb = name.encode("utf-8")
                arr = np.ascontiguousarray(t.data, dtype="<f4")
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write checkpoint to {path!r}: {exc}") from exc


def load_checkpoint(path, config: NetworkConfig | None = None) -> Network:
    """Rebuild a network from file; optional config must match the stored one."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read checkpoint from {path!r}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path!r}: checkpoint truncated")
        out = blob[off : off + n]
        off += n
        return out

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path!r}: bad checkpoint magic")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        file_cfg = NetworkConfig.from_json(take(cfg_len).decode("utf-8"))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path!r}: unreadable config block: {exc}") from exc
    if config is not None and config != file_cfg:
        raise CheckpointError(
            f"{path!r}: stored config does not match the requested one"
        )
    net = build_network(file_cfg, seed=0)
    seen = set()
    (n_params,) = struct.unpack("<I", take(4))
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = take(4 * count)
        if name not in net.params:
            raise CheckpointError(f"{path!r}: unknown parameter {name!r}")
        target = net.params[name]
        if tuple(target.data.shape) != tuple(shape):
            raise CheckpointError(
                f"{path!r}: parameter {name!r} has shape {shape}, expected "
                f"{tuple(target.data.shape)}"
            )
        target.data = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        seen.add(name)
    if seen != set(net.params):
        missing = sorted(set(net.params) - seen)
        raise CheckpointError(f"{path!r}: missing parameters {missing[:3]}...")
    return net
