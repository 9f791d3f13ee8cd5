"""The three networks of the codec: analysis, synthesis, entropy parameters.

All three consume the causal context of previously reconstructed blocks
through block-level masked 3x3 convolutions; every interior layer is a 1x1
convolution so that information mixes across blocks only at the fusion stage.
GDN / IGDN nonlinearities normalize across channels per grid site.

Checkpoints are a fixed little-endian binary layout (see ``save_checkpoint``)
and must roundtrip bit-exactly: encoder and decoder load identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BitstreamError
from .blocks import SCAN_ORDER_ID
from .tensor import Node

# Lagrangian multipliers, one trained model per value; index into this tuple
# is recorded in checkpoints and bitstream headers (255 = custom value).
LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800)
CUSTOM_LAMBDA_IDX = 255

SIGMA_MIN = 0.04  # floor on predicted scales; keeps likelihoods and CDF tables sane
LEAKY_SLOPE = 0.01
GDN_BETA_OFFSET = 1e-6

# 3x3 block-grid masks: tap (ki, kj) reads grid site (r+ki-1, c+kj-1).
# Type A keeps only strictly-causal taps {UL, U, UR, L}; type B adds the center.
MASK_A = np.array([[1, 1, 1], [1, 0, 0], [0, 0, 0]], dtype=np.float64)
MASK_B = np.array([[1, 1, 1], [1, 1, 0], [0, 0, 0]], dtype=np.float64)

_CKPT_MAGIC = b"LBCM"
_CKPT_VERSION = 1


def mask_for(mask_type: str) -> np.ndarray:
    if mask_type == "A":
        return MASK_A
    if mask_type == "B":
        return MASK_B
    raise ValueError(f"unknown mask type {mask_type!r}")


@dataclass(frozen=True)
class HyperParams:
    """Channel widths and kernel choices defining one model configuration."""

    block_size: int = 8
    n: int = 768
    m: int = 96
    k2: int = 1
    lambda_: float = LAMBDAS[0]
    lambda_idx: int = 0
    hps_id: int = 0  # 1 / 2 for the stock presets, 0 for custom widths

    def __post_init__(self):
        if self.block_size not in (4, 8, 16):
            raise ValueError(f"block size must be 4, 8 or 16, got {self.block_size}")
        if self.k2 not in (1, 3):
            raise ValueError(f"K2 must be 1 or 3, got {self.k2}")
        if self.n % 8 or self.n % 4:
            raise ValueError(f"N must be divisible by 8 (got {self.n}) so interior widths are integral")
        if self.m < 1:
            raise ValueError("M must be >= 1")
        if self.lambda_ <= 0:
            raise ValueError("lambda must be positive")

    @property
    def n1(self) -> int:
        return 7 * self.n // 8

    @property
    def n2(self) -> int:
        return 6 * self.n // 8

    @property
    def m1(self) -> int:
        return 6 * self.n // 4

    @property
    def m2(self) -> int:
        return 5 * self.n // 4

    @property
    def m3(self) -> int:
        return 4 * self.n // 4

    @property
    def ctx_channels(self) -> int:
        return 3 * self.block_size * self.block_size

    @property
    def ctx_radius(self) -> int:
        # receptive field of the deepest masked-conv stack (entropy net has
        # two 3x3 stages when K2 == 3, so its context reaches two blocks out)
        return 2 if self.k2 == 3 else 1


def preset_hps(hps_id: int, lambda_idx: int, block_size: int = 8) -> HyperParams:
    """The two stock configurations; 1 is the smaller, 2 the larger."""
    if hps_id == 1:
        n, m, k2 = 768, 96, 1
    elif hps_id == 2:
        n, m, k2 = 1152, 128, 3
    else:
        raise ValueError(f"hps_id must be 1 or 2, got {hps_id}")
    return HyperParams(
        block_size=block_size, n=n, m=m, k2=k2,
        lambda_=LAMBDAS[lambda_idx], lambda_idx=lambda_idx, hps_id=hps_id,
    )


@dataclass
class Model:
    """Named parameter set for the three networks plus its hyper-parameters."""

    hps: HyperParams
    params: dict[str, Node]
    seed: int = 0
    scan_order_id: int = SCAN_ORDER_ID

    def named_parameters(self) -> list[tuple[str, Node]]:
        return sorted(self.params.items())

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def checksum(self) -> int:
        """64-bit hash of the serialized checkpoint bytes."""
        return _hash64(serialize_checkpoint(self))

    def astype(self, dtype) -> "Model":
        params = {k: Node.param(v.value.astype(dtype)) for k, v in self.params.items()}
        return Model(self.hps, params, self.seed, self.scan_order_id)


def _param_shapes(hps: HyperParams) -> dict[str, tuple]:
    c0 = hps.ctx_channels
    n, n1, n2, m = hps.n, hps.n1, hps.n2, hps.m
    m1, m2, m3 = hps.m1, hps.m2, hps.m3
    k2 = hps.k2
    shapes = {
        # analysis: fuse(x 1x1 + ctx masked 3x3) -> GDN -> 1x1 ladder -> M
        "ta.fuse.wx": (n, c0, 1, 1),
        "ta.fuse.wc": (n, c0, 3, 3),
        "ta.fuse.b": (n,),
        "ta.conv1.w": (n1, n, 1, 1),
        "ta.conv1.b": (n1,),
        "ta.conv2.w": (n2, n1, 1, 1),
        "ta.conv2.b": (n2,),
        "ta.conv3.w": (m, n2, 1, 1),
        "ta.conv3.b": (m,),
        # synthesis: fuse(y 1x1 + ctx masked 3x3) -> IGDN -> 1x1 ladder -> 3B^2
        "ts.fuse.wy": (m1, m, 1, 1),
        "ts.fuse.wc": (m1, c0, 3, 3),
        "ts.fuse.b": (m1,),
        "ts.conv1.w": (m2, m1, 1, 1),
        "ts.conv1.b": (m2,),
        "ts.conv2.w": (m3, m2, 1, 1),
        "ts.conv2.b": (m3,),
        "ts.conv3.w": (c0, m3, 1, 1),
        "ts.conv3.b": (c0,),
        # entropy parameters: masked 3x3 -> LeakyReLU -> K2xK2 -> LeakyReLU -> 1x1 -> 2M
        "en.conv0.w": (n2, c0, 3, 3),
        "en.conv0.b": (n2,),
        "en.conv1.w": (n2, n2, k2, k2),
        "en.conv1.b": (n2,),
        "en.conv2.w": (2 * m, n2, 1, 1),
        "en.conv2.b": (2 * m,),
    }
    for width, tag in ((n, "ta.gdn0"), (n1, "ta.gdn1"), (n2, "ta.gdn2"),
                       (m1, "ts.igdn0"), (m2, "ts.igdn1"), (m3, "ts.igdn2")):
        shapes[f"{tag}.beta_raw"] = (width,)
        shapes[f"{tag}.gamma_raw"] = (width, width)
    return shapes


def init_model(hps: HyperParams, seed: int = 0, dtype=np.float32) -> Model:
    """Fan-in-scaled uniform init for conv weights; near-identity GDN start.

    gamma_raw starts at a small positive value everywhere (not exactly zero):
    under the squaring reparameterization an exact zero has zero gradient and
    could never leave it.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Node] = {}
    for name, shape in sorted(_param_shapes(hps).items()):
        if name.endswith("beta_raw"):
            value = np.ones(shape)
        elif name.endswith("gamma_raw"):
            width = shape[0]
            value = 0.1 * np.eye(width) + rng.uniform(0.01, 0.05, size=shape)
        elif name.endswith(".w") or name.endswith(".wx") or name.endswith(".wy") or name.endswith(".wc"):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        else:  # bias
            fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Node.param(value.astype(dtype))
    return Model(hps, params, seed=seed)


# ---------------------------------------------------------------------------
# layer primitives (autodiff graph path)

def masked_conv(ctx: Node, weight: Node, bias: Node | None, mask_type: str) -> Node:
    """3x3 block-grid conv whose non-causal taps are zeroed before convolving,
    so their gradients are structurally zero as well."""
    if weight.shape[2:] != (3, 3):
        raise ValueError(f"masked conv requires a 3x3 kernel, got {weight.shape[2:]}")
    mask = Node.const(mask_for(mask_type).astype(weight.dtype))
    return T.conv2d(ctx, T.mul(weight, mask), bias, padding=1)


def gdn_params(beta_raw: Node, gamma_raw: Node) -> tuple[Node, Node]:
    """Nonnegativity by squaring: beta = beta_raw^2 + 1e-6 > 0, gamma = gamma_raw^2 >= 0."""
    beta = T.add(T.square(beta_raw), Node.const(np.asarray(GDN_BETA_OFFSET, dtype=beta_raw.dtype)))
    gamma = T.square(gamma_raw)
    return beta, gamma


def gdn(x: Node, beta: Node, gamma: Node) -> Node:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2), per grid site."""
    c = x.shape[0]
    pool = T.conv2d(T.square(x), _as_conv_weight(gamma, c), beta, padding=0)
    return T.div(x, T.sqrt(pool))


def igdn(x: Node, beta: Node, gamma: Node) -> Node:
    """y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2), per grid site."""
    c = x.shape[0]
    pool = T.conv2d(T.square(x), _as_conv_weight(gamma, c), beta, padding=0)
    return T.mul(x, T.sqrt(pool))


def _as_conv_weight(gamma: Node, c: int) -> Node:
    if gamma.shape != (c, c):
        raise ValueError(f"gamma must be ({c},{c}), got {gamma.shape}")
    # (C,C) channel-mixing matrix as a 1x1 conv kernel; reshape is a pure view
    value = gamma.value.reshape(c, c, 1, 1)
    return T.make_node("reshape", value, ((gamma, lambda g: g.reshape(c, c)),))


def _gdn_layer(model: Model, tag: str, x: Node, inverse: bool) -> Node:
    beta, gamma = gdn_params(model.params[f"{tag}.beta_raw"], model.params[f"{tag}.gamma_raw"])
    return igdn(x, beta, gamma) if inverse else gdn(x, beta, gamma)


def _conv1x1(model: Model, tag: str, x: Node) -> Node:
    return T.conv2d(x, model.params[f"{tag}.w"], model.params[f"{tag}.b"], padding=0)


def clamp01(x: Node) -> Node:
    lo = T.clamp_min(x, 0.0)
    return T.sub(Node.const(np.asarray(1.0, dtype=x.dtype)),
                 T.clamp_min(T.sub(Node.const(np.asarray(1.0, dtype=x.dtype)), lo), 0.0))


# ---------------------------------------------------------------------------
# the three networks (whole-grid autodiff path)

def _check_grids(a: Node, b: Node, what: str) -> None:
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"{what}: grid dims differ, {a.shape[1:]} vs {b.shape[1:]}")


def analysis_transform(model: Model, x_blocks: Node, ctx_blocks: Node) -> Node:
    """Latents from the current block column and the causal context grid.

    Output site (r, c) depends on x at (r, c) only and on ctx at strictly
    causal sites only; everything after the fusion is 1x1.
    """
    _check_grids(x_blocks, ctx_blocks, "analysis_transform")
    p = model.params
    fused = T.add(
        T.conv2d(x_blocks, p["ta.fuse.wx"], p["ta.fuse.b"], padding=0),
        masked_conv(ctx_blocks, p["ta.fuse.wc"], None, "A"),
    )
    h = _gdn_layer(model, "ta.gdn0", fused, inverse=False)
    h = _conv1x1(model, "ta.conv1", h)
    h = _gdn_layer(model, "ta.gdn1", h, inverse=False)
    h = _conv1x1(model, "ta.conv2", h)
    h = _gdn_layer(model, "ta.gdn2", h, inverse=False)
    return _conv1x1(model, "ta.conv3", h)


def synthesis_transform(model: Model, y_hat: Node, ctx_blocks: Node, clamp: bool = True) -> Node:
    """Reconstructed block column from latents and causal context.

    ``clamp`` bounds the output to [0, 1]; the training loss runs unclamped
    so gradients survive at saturated pixels.
    """
    _check_grids(y_hat, ctx_blocks, "synthesis_transform")
    p = model.params
    fused = T.add(
        T.conv2d(y_hat, p["ts.fuse.wy"], p["ts.fuse.b"], padding=0),
        masked_conv(ctx_blocks, p["ts.fuse.wc"], None, "A"),
    )
    h = _gdn_layer(model, "ts.igdn0", fused, inverse=True)
    h = _conv1x1(model, "ts.conv1", h)
    h = _gdn_layer(model, "ts.igdn1", h, inverse=True)
    h = _conv1x1(model, "ts.conv2", h)
    h = _gdn_layer(model, "ts.igdn2", h, inverse=True)
    out = _conv1x1(model, "ts.conv3", h)
    return clamp01(out) if clamp else out


def entropy_parameters(model: Model, ctx_blocks: Node) -> tuple[Node, Node]:
    """Per-latent Gaussian (mu, sigma) from the causal context alone.

    sigma is floored at SIGMA_MIN.  Both outputs at site (r, c) are invariant
    to ctx changes at any non-causal site.
    """
    p = model.params
    h = masked_conv(ctx_blocks, p["en.conv0.w"], p["en.conv0.b"], "A")
    h = T.leaky_relu(h, LEAKY_SLOPE)
    if model.hps.k2 == 3:
        # the first stage is already causal, so the interior mask may keep its center
        h = masked_conv(h, p["en.conv1.w"], p["en.conv1.b"], "B")
    else:
        h = _conv1x1(model, "en.conv1", h)
    h = T.leaky_relu(h, LEAKY_SLOPE)
    out = _conv1x1(model, "en.conv2", h)
    m = model.hps.m
    mu = _slice_channels(out, 0, m)
    sigma_raw = _slice_channels(out, m, 2 * m)
    return mu, T.clamp_min(sigma_raw, SIGMA_MIN)


def _slice_channels(x: Node, lo: int, hi: int) -> Node:
    value = np.ascontiguousarray(x.value[lo:hi])

    def pull(g):
        full = np.zeros_like(x.value)
        full[lo:hi] = g
        return full

    return T.make_node("slice", value, ((x, pull),))


# ---------------------------------------------------------------------------
# checkpoint serialization

def _hash64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def serialize_checkpoint(model: Model) -> bytes:
    """Fixed little-endian layout; parameter tensors as float32, names sorted."""
    hps = model.hps
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack(
        "<BBBBHIIdBQ",
        _CKPT_VERSION,
        hps.hps_id,
        hps.lambda_idx,
        hps.k2,
        hps.block_size,
        hps.n,
        hps.m,
        hps.lambda_,
        model.scan_order_id,
        model.seed,
    ))
    items = model.named_parameters()
    buf.write(struct.pack("<I", len(items)))
    for name, node in items:
        arr = node.value
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoints store float32 parameters; {name} is {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


def deserialize_checkpoint(data: bytes) -> Model:
    view = io.BytesIO(data)

    def take(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise BitstreamError("checkpoint truncated")
        return chunk

    if take(4) != _CKPT_MAGIC:
        raise BitstreamError("not a checkpoint file (bad magic)")
    version, hps_id, lambda_idx, k2, block_size, n, m, lambda_, scan_order, seed = struct.unpack(
        "<BBBBHIIdBQ", take(struct.calcsize("<BBBBHIIdBQ"))
    )
    if version != _CKPT_VERSION:
        raise BitstreamError(f"unsupported checkpoint version {version}")
    if scan_order != SCAN_ORDER_ID:
        raise BitstreamError(f"unknown intra-block scan order {scan_order}")
    hps = HyperParams(block_size=block_size, n=n, m=m, k2=k2,
                      lambda_=lambda_, lambda_idx=lambda_idx, hps_id=hps_id)
    (count,) = struct.unpack("<I", take(4))
    expected = _param_shapes(hps)
    params: dict[str, Node] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
        if name not in expected:
            raise BitstreamError(f"checkpoint has unexpected parameter {name!r}")
        if tuple(shape) != expected[name]:
            raise BitstreamError(f"parameter {name!r} has shape {shape}, expected {expected[name]}")
        params[name] = Node.param(arr)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise BitstreamError(f"checkpoint is missing parameters: {missing}")
    if view.read(1):
        raise BitstreamError("trailing bytes after checkpoint payload")
    return Model(hps, params, seed=seed, scan_order_id=scan_order)


def save_checkpoint(model: Model, path) -> None:
    data = serialize_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
