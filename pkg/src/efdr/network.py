"""Invertible hiding network.

The network maps a (cover, secret) pair of 192-channel sub-band maps to a
(stego, r_f) pair through

1. per-channel power-of-two normalization,
2. an invertible 1x1 convolution over the 384 concatenated channels,
3. ``N`` affine coupling sub-modules whose branch functions are stacks of
   Pre-LN transformer blocks over the (H/8)*(W/8) spatial tokens.

Maps are batched arrays of shape (B, C, H/8, W/8); unbatched (C, H/8, W/8)
input is accepted and returned unbatched.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import tensor_io

SUBBANDS = 192


class SingularWeight(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    num_submodules: int = 12
    heads: int = 8
    dim_heads: int = 512        # total attention width across all heads
    dim_mlp: int = 1024
    blocks_per_branch: int = 3
    clamp_alpha: float = 2.0
    pos_embed: tuple[int, int] | None = None  # (H/8, W/8) grid when enabled
    init_std: float = 0.02
    enhance_init: str = "orthogonal"   # or "identity"

    def __post_init__(self):
        if self.dim_heads % self.heads:
            raise ValueError("dim_heads must be divisible by heads")
        if self.clamp_alpha <= 0:
            raise ValueError("clamp_alpha must be positive")
        if self.enhance_init not in ("orthogonal", "identity"):
            raise ValueError(f"unknown enhance_init {self.enhance_init!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["pos_embed"] = list(self.pos_embed) if self.pos_embed else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("pos_embed"):
            d["pos_embed"] = tuple(d["pos_embed"])
        return cls(**d)


class Module:
    """Parameter container; subclasses register tensors in ``_params`` and
    children in ``_children`` (both name-ordered)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name, value, dtype):
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def maps_to_tokens(x):
    b, c, h, w = x.shape
    return ad.transpose(ad.reshape(x, (b, c, h * w)), (0, 2, 1))


def tokens_to_maps(x, h, w):
    b, t, c = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1)), (b, c, h, w))


class TransformerBlock(Module):
    """One Pre-LN block: x += MHSA(LN(x)); x += MLP(LN(x)). Tokens are (B, T, d)."""

    def __init__(self, dim, heads, dim_heads, dim_mlp, rng, dtype, std=0.02):
        super().__init__()
        self.heads = heads
        self.dim_head = dim_heads // heads
        n = lambda *s: rng.normal(0.0, std, size=s)  # noqa: E731
        self.ln1_g = self.param("ln1_g", np.ones(dim), dtype)
        self.ln1_b = self.param("ln1_b", np.zeros(dim), dtype)
        self.wq = self.param("wq", n(dim, dim_heads), dtype)
        self.wk = self.param("wk", n(dim, dim_heads), dtype)
        self.wv = self.param("wv", n(dim, dim_heads), dtype)
        self.wo = self.param("wo", n(dim_heads, dim), dtype)
        self.bo = self.param("bo", np.zeros(dim), dtype)
        self.ln2_g = self.param("ln2_g", np.ones(dim), dtype)
        self.ln2_b = self.param("ln2_b", np.zeros(dim), dtype)
        self.w1 = self.param("w1", n(dim, dim_mlp), dtype)
        self.b1 = self.param("b1", np.zeros(dim_mlp), dtype)
        self.w2 = self.param("w2", n(dim_mlp, dim), dtype)
        self.b2 = self.param("b2", np.zeros(dim), dtype)

    def attention(self, x):
        b, t, _ = x.shape
        h, dh = self.heads, self.dim_head

        def heads_first(z):
            return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads_first(x @ self.wq)
        k = heads_first(x @ self.wk)
        v = heads_first(x @ self.wv)
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
        out = ad.softmax(scores, axis=-1) @ v
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, h * dh))
        return out @ self.wo + self.bo

    def __call__(self, x):
        x = x + self.attention(ad.layer_norm(x, self.ln1_g, self.ln1_b))
        hidden = ad.gelu(ad.layer_norm(x, self.ln2_g, self.ln2_b) @ self.w1 + self.b1)
        return x + (hidden @ self.w2 + self.b2)


class BranchNet(Module):
    """Stack of transformer blocks followed by a zero-initialised linear head,
    so the branch outputs exactly zero at initialisation."""

    def __init__(self, cfg: NetConfig, rng, dtype):
        super().__init__()
        self.blocks = []
        for i in range(cfg.blocks_per_branch):
            blk = TransformerBlock(SUBBANDS, cfg.heads, cfg.dim_heads, cfg.dim_mlp,
                                   rng, dtype, cfg.init_std)
            self._children[f"block{i}"] = blk
            self.blocks.append(blk)
        self.head_w = self.param("head_w", np.zeros((SUBBANDS, SUBBANDS)), dtype)
        self.head_b = self.param("head_b", np.zeros(SUBBANDS), dtype)

    def apply_tokens(self, tokens, pos=None):
        if pos is not None:
            tokens = tokens + pos
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def __call__(self, x, pos=None):
        """(B, 192, h, w) map -> (B, 192, h, w) map."""
        _, _, h, w = x.shape
        t = self.apply_tokens(maps_to_tokens(x), pos)
        return tokens_to_maps(t @ self.head_w + self.head_b, h, w)


def transformer_apply(branch, blocks, pos=None):
    """Run a residual block stack over the spatial tokens of a sub-band map."""
    branch = ad.as_tensor(branch)
    unbatched = branch.ndim == 3
    if unbatched:
        branch = ad.reshape(branch, (1,) + branch.shape)
    _, _, h, w = branch.shape
    t = maps_to_tokens(branch)
    if pos is not None:
        t = t + pos
    for blk in blocks:
        t = blk(t)
    out = tokens_to_maps(t, h, w)
    return ad.reshape(out, out.shape[1:]) if unbatched else out


class CouplingSubmodule(Module):
    def __init__(self, cfg: NetConfig, rng, dtype):
        super().__init__()
        self.alpha = cfg.clamp_alpha
        self.phi = BranchNet(cfg, rng, dtype)
        self.psi = BranchNet(cfg, rng, dtype)
        self.upsilon = BranchNet(cfg, rng, dtype)
        self._children.update(phi=self.phi, psi=self.psi, upsilon=self.upsilon)
        self.pos = None
        if cfg.pos_embed:
            gh, gw = cfg.pos_embed
            self.pos = self.param("pos", rng.normal(0.0, cfg.init_std, (gh * gw, SUBBANDS)), dtype)

    def log_scale(self, y1, alpha=None):
        return ad.soft_clamp(self.psi(y1, self.pos), alpha or self.alpha)

    def forward(self, x1, x2, alpha=None):
        y1 = x1 + self.phi(x2, self.pos)
        y2 = x2 * ad.exp(self.log_scale(y1, alpha)) + self.upsilon(y1, self.pos)
        return y1, y2

    def inverse(self, y1, y2, alpha=None):
        x2 = (y2 - self.upsilon(y1, self.pos)) * ad.exp(-self.log_scale(y1, alpha))
        x1 = y1 - self.phi(x2, self.pos)
        return x1, x2


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class EnhanceLayer(Module):
    """Invertible 1x1 convolution over the 384 concatenated sub-band channels."""

    # reciprocal condition number; |det| alone underflows for 384 channels
    rcond_threshold = 1e-8

    def __init__(self, channels, rng, dtype, init="orthogonal"):
        super().__init__()
        w = np.eye(channels) if init == "identity" else random_orthogonal(channels, rng)
        self.weight = self.param("weight", w, dtype)
        self._cache_key = None
        self._inv = None

    def check(self):
        sv = np.linalg.svd(self.weight.data.astype(np.float64), compute_uv=False)
        if not np.all(np.isfinite(sv)) or sv[-1] <= self.rcond_threshold * sv[0]:
            raise SingularWeight("enhance weight is (nearly) singular")

    def inverse_matrix(self):
        """Cached float64 inverse, recomputed whenever the weight changes."""
        key = (self.weight.version, id(self.weight.data))
        if key != self._cache_key:
            self.check()
            self._inv = np.linalg.inv(self.weight.data.astype(np.float64))
            self._cache_key = key
        return self._inv

    def forward(self, x):
        return ad.conv1x1(x, self.weight)

    def inverse(self, y):
        if ad._grad_enabled and self.weight.requires_grad:
            self.check()
            return ad.conv1x1(y, ad.inverse(self.weight))
        inv = Tensor(self.inverse_matrix().astype(self.weight.dtype))
        return ad.conv1x1(y, inv)


def _batched(x, dtype):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype)) if not x.requires_grad else x
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 4 or x.shape[1] != SUBBANDS:
        raise ValueError(f"expected (B, 192, h, w) sub-band maps, got {x.shape}")
    return x, False


def _unbatch(x, flag):
    return ad.reshape(x, x.shape[1:]) if flag else x


class EfdrModel(Module):
    def __init__(self, cfg: NetConfig | None = None, seed=0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.enhance = EnhanceLayer(2 * SUBBANDS, rng, self.dtype, self.cfg.enhance_init)
        self._children["enhance"] = self.enhance
        self.submodules = []
        for i in range(self.cfg.num_submodules):
            sub = CouplingSubmodule(self.cfg, rng, self.dtype)
            self._children[f"sub{i}"] = sub
            self.submodules.append(sub)
        # frozen normalization, powers of two so scaling is exact
        self.norm_scale = np.ones(2 * SUBBANDS, dtype=self.dtype)

    # -- normalization

    def set_normalization(self, cover_std, secret_std):
        std = np.concatenate([np.asarray(cover_std, float), np.asarray(secret_std, float)])
        exponent = np.round(np.log2(np.maximum(std, 1.0)))
        self.norm_scale = (2.0 ** -exponent).astype(self.dtype)

    def _scale(self, lo, hi):
        return Tensor(self.norm_scale[lo:hi, None, None])

    # -- passes

    def forward(self, cover, secret, alpha=None):
        c, flag = _batched(cover, self.dtype)
        s, _ = _batched(secret, self.dtype)
        if c.shape != s.shape:
            raise ValueError(f"cover {c.shape} and secret {s.shape} differ in shape")
        x = ad.concat([c, s], axis=1) * self._scale(0, 2 * SUBBANDS)
        x = self.enhance.forward(x)
        x1 = ad.slice_axis(x, 0, SUBBANDS, 1)
        x2 = ad.slice_axis(x, SUBBANDS, 2 * SUBBANDS, 1)
        for sub in self.submodules:
            x1, x2 = sub.forward(x1, x2, alpha)
        stego = x1 * Tensor(1.0 / self.norm_scale[:SUBBANDS, None, None])
        return _unbatch(stego, flag), _unbatch(x2, flag)

    def inverse(self, stego, aux=None, alpha=None):
        st, flag = _batched(stego, self.dtype)
        if aux is None:
            aux = Tensor(np.zeros(st.shape, dtype=self.dtype))
        a, _ = _batched(aux, self.dtype)
        if a.shape != st.shape:
            raise ValueError("aux shape does not match stego shape")
        y1 = st * self._scale(0, SUBBANDS)
        y2 = a
        for sub in reversed(self.submodules):
            y1, y2 = sub.inverse(y1, y2, alpha)
        x = self.enhance.inverse(ad.concat([y1, y2], axis=1))
        x = x * Tensor(1.0 / self.norm_scale[:, None, None])
        cover = ad.slice_axis(x, 0, SUBBANDS, 1)
        secret = ad.slice_axis(x, SUBBANDS, 2 * SUBBANDS, 1)
        return _unbatch(cover, flag), _unbatch(secret, flag)

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        out["norm_scale"] = self.norm_scale
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
            p.version += 1
        if "norm_scale" in state:
            self.norm_scale = np.array(state["norm_scale"], dtype=self.dtype)


def model_forward(model, cover, secret):
    """Hide: returns (stego sub-bands, r_f) as numpy arrays."""
    with ad.no_grad():
        st, rf = model.forward(cover, secret)
    return st.data, rf.data


def model_inverse(model, stego, aux=None):
    """Reveal: returns (recovered cover sub-bands, recovered secret sub-bands)."""
    with ad.no_grad():
        c, s = model.inverse(stego, aux)
    return c.data, s.data


def save_checkpoint(model: EfdrModel, path, extra: dict | None = None):
    meta = {"kind": "efdr-model", "config": model.cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    tensor_io.save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path) -> EfdrModel:
    tensors, meta = tensor_io.load_tensors(path)
    if meta.get("kind") != "efdr-model":
        raise tensor_io.VersionMismatch("file is not a model checkpoint")
    model = EfdrModel(NetConfig.from_dict(meta["config"]), dtype=np.float32)
    model.load_state_dict(tensors)
    return model
