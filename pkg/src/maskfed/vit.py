"""Split Vision Transformer: client-local layers, shared global layers, head.

The model is one ViT whose transformer blocks are split at layer M: blocks
[0, M) plus the embedding tables and class token form the client-local
parameter group (phi), blocks [M, N_T) plus the final norm form the global
group (w_global), and a single affine map over C classes is the head
(theta). Training runs on a random subset of image patches whose original
positional embeddings are retained; inference always sees the full image.
Representation vectors are the class-token output of the global module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    """Architecture geometry.

    n_t is the total transformer layer count, m the client-local prefix,
    so the global module has n_t - m layers.
    """

    h: int = 224
    w_img: int = 224
    p: int = 16
    d: int = 768
    heads: int = 12
    n_t: int = 12
    m: int = 2
    mlp_ratio: int = 4
    c: int = 100
    channels: int = 3

    def __post_init__(self):
        if self.h % self.p or self.w_img % self.p:
            raise ConfigError(f"image {self.h}x{self.w_img} not divisible by patch size {self.p}")
        if not 1 <= self.m <= self.n_t - 1:
            raise ConfigError(f"m must satisfy 1 <= m <= n_t-1, got m={self.m}, n_t={self.n_t}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.c < 2:
            raise ConfigError("need at least two classes")

    @property
    def n(self) -> int:
        """Patch count h*w/p^2."""
        return (self.h // self.p) * (self.w_img // self.p)

    @property
    def n_global(self) -> int:
        return self.n_t - self.m

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.channels


@dataclass
class MaskedBatch:
    """Unmasked patch sequences with their original grid positions."""

    patches: Tensor              # [b, kept, p*p*channels]
    kept_indices: np.ndarray     # [b, kept] ints into [0, n)
    labels: np.ndarray           # [b] ints
    r_m: float

    def validate(self, n: int):
        idx = self.kept_indices
        if idx.ndim != 2 or idx.shape[0] != self.patches.shape[0]:
            raise DimensionError("kept_indices must be [b, kept]")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DimensionError(f"kept index out of range [0, {n})")
        if not (np.diff(idx, axis=1) > 0).all():
            raise DimensionError("kept_indices must be strictly increasing per sample")


def kept_count(n: int, r_m: float) -> int:
    """Patches surviving the mask: max(1, floor((1-r_m)*n))."""
    if not 0.0 <= r_m < 1.0:
        raise ConfigError(f"masking ratio must lie in [0, 1), got {r_m}")
    return max(1, int((1.0 - r_m) * n))


class ParamSet:
    """The three named-tensor groups phi / w_global / theta."""

    def __init__(self, phi: dict, w_global: dict, theta: dict):
        self.phi = phi
        self.w_global = w_global
        self.theta = theta
        names = list(phi) + list(w_global) + list(theta)
        if len(set(names)) != len(names):
            raise ConfigError("duplicate tensor name across parameter groups")

    def groups(self):
        return {"phi": self.phi, "w_global": self.w_global, "theta": self.theta}

    def set_trainable(self, *, phi: bool, w_global: bool, theta: bool):
        for t in self.phi.values():
            t.requires_grad = phi
        for t in self.w_global.values():
            t.requires_grad = w_global
        for t in self.theta.values():
            t.requires_grad = theta

    def clone(self) -> "ParamSet":
        def cp(group):
            return {k: Tensor(v.detach_array(), requires_grad=v.requires_grad)
                    for k, v in group.items()}

        return ParamSet(cp(self.phi), cp(self.w_global), cp(self.theta))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group in (self.phi, self.w_global, self.theta):
            for k, v in group.items():
                out[k] = v.data
        return out


def _trunc_normal(rng, shape, std, dtype):
    # resample outliers beyond 2 std, like standard ViT init
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def _block_shapes(i: int, cfg: ViTConfig) -> dict:
    d, hd = cfg.d, cfg.mlp_ratio * cfg.d
    base = f"block{i}."
    return {
        base + "ln1.g": (d,), base + "ln1.b": (d,),
        base + "wq": (d, d), base + "bq": (d,),
        base + "wk": (d, d), base + "bk": (d,),
        base + "wv": (d, d), base + "bv": (d,),
        base + "wo": (d, d), base + "bo": (d,),
        base + "ln2.g": (d,), base + "ln2.b": (d,),
        base + "w1": (d, hd), base + "b1": (hd,),
        base + "w2": (hd, d), base + "b2": (d,),
    }


def split_params(blocks: list[dict], m: int):
    """Assign blocks [0, m) to the local module, [m, n_t) to the global one."""
    n_t = len(blocks)
    if not 1 <= m <= n_t - 1:
        raise ConfigError(f"m must satisfy 1 <= m <= n_t-1, got m={m}, n_t={n_t}")
    return blocks[:m], blocks[m:]


def param_shapes(cfg: ViTConfig):
    """Name -> shape maps for the three groups, per the layer split."""
    blocks = [_block_shapes(i, cfg) for i in range(cfg.n_t)]
    local_blocks, global_blocks = split_params(blocks, cfg.m)

    phi = {
        "embed.w": (cfg.patch_dim, cfg.d),
        "embed.b": (cfg.d,),
        "pos": (cfg.n + 1, cfg.d),
        "cls": (1, cfg.d),
    }
    for blk in local_blocks:
        phi.update(blk)

    w_global = {}
    for blk in global_blocks:
        w_global.update(blk)
    w_global["final_norm.g"] = (cfg.d,)
    w_global["final_norm.b"] = (cfg.d,)

    theta = {"head.w": (cfg.d, cfg.c), "head.b": (cfg.c,)}
    return phi, w_global, theta


def _fill(name: str, shape, rng, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape, dtype=dtype)
    if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
        return np.zeros(shape, dtype=dtype)
    return _trunc_normal(rng, shape, 0.02, dtype)


def init_params(cfg: ViTConfig, rng, dtype=np.float32) -> ParamSet:
    """Fresh parameters: trunc-normal(0.02) weights, zero biases, unit norms."""
    dtype = np.dtype(dtype)
    phi_s, w_s, th_s = param_shapes(cfg)

    def build(shapes):
        return {k: Tensor(_fill(k, s, rng, dtype)) for k, s in shapes.items()}

    ps = ParamSet(build(phi_s), build(w_s), build(th_s))
    ps.set_trainable(phi=True, w_global=False, theta=True)
    return ps


def traced_params(cfg: ViTConfig, dtype=np.float32) -> ParamSet:
    """Shape-only ParamSet for MAC tracing (client trainability flags)."""
    phi_s, w_s, th_s = param_shapes(cfg)

    def sh(shapes, rg):
        return {k: Tensor.shape_only(s, dtype, rg) for k, s in shapes.items()}

    return ParamSet(sh(phi_s, True), sh(w_s, False), sh(th_s, True))


def traced_masked_batch(cfg: ViTConfig, r_m: float, b: int = 1,
                        dtype=np.float32) -> MaskedBatch:
    """Shape-only batch with the clamped keep count for r_m."""
    k = kept_count(cfg.n, r_m)
    idx = np.tile(np.arange(k, dtype=np.int64), (b, 1))
    return MaskedBatch(Tensor.shape_only((b, k, cfg.patch_dim), dtype), idx,
                       np.zeros(b, dtype=np.int64), r_m)


# ---------------------------------------------------------------------------
# data -> patches


def patchify(image: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """[channels, h, w] -> [n, p*p*channels], row-major grid, channel-major."""
    c, h, w = image.shape
    if (c, h, w) != (cfg.channels, cfg.h, cfg.w_img):
        raise DimensionError(
            f"image shape {image.shape} does not match config "
            f"({cfg.channels}, {cfg.h}, {cfg.w_img})"
        )
    return patchify_batch(image[None], cfg)[0]


def patchify_batch(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    b, c, h, w = images.shape
    if (c, h, w) != (cfg.channels, cfg.h, cfg.w_img):
        raise DimensionError(
            f"images shape {images.shape[1:]} does not match config "
            f"({cfg.channels}, {cfg.h}, {cfg.w_img})"
        )
    gh, gw, p = h // cfg.p, w // cfg.p, cfg.p
    # [b, c, gh, p, gw, p] -> [b, gh, gw, c, p, p]: channel varies slowest per patch
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def mask_discard(patches: np.ndarray, r_m: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Keep a uniform random subset of patch rows; discard the rest.

    Returns (kept patches, sorted original indices). Discarded patches are
    simply dropped — they never reach the model or the wire.
    """
    n = patches.shape[0]
    k = kept_count(n, r_m)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return patches[idx], idx


def make_masked_batch(images: np.ndarray, labels: np.ndarray, r_m: float,
                      rng, cfg: ViTConfig) -> MaskedBatch:
    """Patchify a batch and mask each sample independently."""
    allp = patchify_batch(images, cfg)
    b, n, v = allp.shape
    k = kept_count(n, r_m)
    if k == n:
        idx = np.tile(np.arange(n), (b, 1))
        kept = allp
    else:
        # per-sample random subset: argsort of uniform noise = random perm
        noise = rng.random((b, n))
        idx = np.sort(np.argsort(noise, axis=1)[:, :k], axis=1)
        kept = np.take_along_axis(allp, idx[:, :, None], axis=1)
    return MaskedBatch(Tensor(np.ascontiguousarray(kept)), idx,
                       np.asarray(labels), r_m)


# ---------------------------------------------------------------------------
# forward passes


def _attention(x: Tensor, blk: dict, base: str, cfg: ViTConfig) -> Tensor:
    b, s, d = x.shape
    hds, dh = cfg.heads, cfg.d // cfg.heads
    q = T.add(T.matmul(x, blk[base + "wq"]), blk[base + "bq"])
    k = T.add(T.matmul(x, blk[base + "wk"]), blk[base + "bk"])
    v = T.add(T.matmul(x, blk[base + "wv"]), blk[base + "bv"])
    # [b, s, d] -> [b, heads, s, dh]
    q = T.transpose(T.reshape(q, (b, s, hds, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, s, hds, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, s, hds, dh)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax_rows(scores)               # [b, heads, s, s]
    ctx = T.matmul(attn, v)                     # [b, heads, s, dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return T.add(T.matmul(ctx, blk[base + "wo"]), blk[base + "bo"])


def _block(x: Tensor, params: dict, i: int, cfg: ViTConfig) -> Tensor:
    base = f"block{i}."
    a = T.layer_norm(x, params[base + "ln1.g"], params[base + "ln1.b"])
    x = T.add(x, _attention(a, params, base, cfg))
    h = T.layer_norm(x, params[base + "ln2.g"], params[base + "ln2.b"])
    h = T.gelu(T.add(T.matmul(h, params[base + "w1"]), params[base + "b1"]))
    h = T.add(T.matmul(h, params[base + "w2"]), params[base + "b2"])
    return T.add(x, h)


def local_forward(phi: dict, batch: MaskedBatch, cfg: ViTConfig) -> Tensor:
    """Embed kept patches, add their original positional embeddings,
    prepend the class token, and run the M local blocks -> [b, kept+1, d]."""
    b, kept, v = batch.patches.shape
    if v != cfg.patch_dim:
        raise DimensionError(f"patch dim {v} != p*p*channels {cfg.patch_dim}")
    x = T.add(T.matmul(batch.patches, phi["embed.w"]), phi["embed.b"])
    cls = T.tile_batch(phi["cls"], b)           # [b, 1, d]
    x = T.concat([cls, x], axis=1)              # [b, kept+1, d]
    # position 0 is reserved for the class token; patches shift by one
    idx = np.concatenate(
        [np.zeros((b, 1), dtype=np.int64), np.asarray(batch.kept_indices) + 1], axis=1
    )
    x = T.add(x, T.gather_rows(phi["pos"], idx))
    for i in range(cfg.m):
        x = _block(x, phi, i, cfg)
    return x


def global_forward(w_global: dict, h_p: Tensor, cfg: ViTConfig) -> Tensor:
    """Run the N global blocks plus final norm; return the class-token row."""
    if h_p.shape[-1] != cfg.d:
        raise DimensionError(f"feature width {h_p.shape[-1]} != d {cfg.d}")
    x = h_p
    for i in range(cfg.m, cfg.n_t):
        x = _block(x, w_global, i, cfg)
    x = T.layer_norm(x, w_global["final_norm.g"], w_global["final_norm.b"])
    return T.take_token(x, 0)                   # [b, d]


def head_forward(theta: dict, h_r: Tensor) -> Tensor:
    if h_r.shape[-1] != theta["head.w"].shape[0]:
        raise DimensionError(
            f"repr width {h_r.shape[-1]} != head input {theta['head.w'].shape[0]}"
        )
    return T.add(T.matmul(h_r, theta["head.w"]), theta["head.b"])


def full_forward(params: ParamSet, images: np.ndarray, r_m: float, rng,
                 cfg: ViTConfig, labels=None) -> Tensor:
    """patchify -> mask -> local -> global -> head. r_m=0 is the inference path."""
    if labels is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    batch = make_masked_batch(images, labels, r_m, rng, cfg)
    h_p = local_forward(params.phi, batch, cfg)
    h_r = global_forward(params.w_global, h_p, cfg)
    return head_forward(params.theta, h_r)
