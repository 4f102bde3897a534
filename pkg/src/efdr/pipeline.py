"""Hide / reveal composition, training losses and the training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .autodiff import Tensor
from .jpeg_codec import JpegFile, clamp_coefficients
from .metrics import psnr
from .network import EfdrModel, NetConfig, model_forward, model_inverse, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-6
    weight_decay: float = 5e-4
    batch_size: int = 4          # images per step, i.e. batch_size // 2 pairs
    epochs: int = 200
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    qf: int = 75
    crop: int = 128
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 10
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        self.betas = tuple(self.betas)
        if self.lr < 0 or self.plateau_factor <= 0 or self.plateau_patience < 0:
            raise ValueError("learning-rate schedule parameters must be positive")
        if not 1 <= self.qf <= 100:
            raise ValueError(f"qf {self.qf} outside 1..100")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size and epochs must be positive")

    @property
    def pairs_per_step(self):
        return max(1, self.batch_size // 2)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class StegoResult:
    stego_jpeg: JpegFile
    r_f: np.ndarray
    prequant_psnr: float | str
    postquant_psnr: float | str


# ---------------------------------------------------------------- differentiable decodes

def _decode_linear(x, steps):
    """Linear part of sub-band map -> RGB pixels; ``steps`` (B, 3, 8, 8) or None."""
    blocks = tf.subbands_to_blocks(x)
    if steps is not None:
        blocks = blocks * steps[:, :, None, None]
    pix = tf.block_merge(tf.idct8x8(blocks), level_shift=False)
    return np.einsum("ij,bjhw->bihw", tf.YCBCR_TO_RGB, pix)


def _decode_adjoint(g, steps):
    pix = np.einsum("ji,bjhw->bihw", tf.YCBCR_TO_RGB, g)
    blocks = tf.dct8x8(tf.block_split(pix, level_shift=False))
    if steps is not None:
        blocks = blocks * steps[:, :, None, None]
    return tf.blocks_to_subbands(blocks)


def subbands_to_rgb(x, quant_steps=None):
    """Differentiable, unclamped pixel decode of a batched (B, 192, h, w) map.

    With ``quant_steps`` the map holds quantized coefficients; without, plain
    orthonormal DCT values (the secret branch). Zero maps decode to gray 128,
    so the decode is ``linear(x) + 128``.
    """
    x = ad.as_tensor(x)
    steps = None if quant_steps is None else np.asarray(quant_steps, dtype=np.float64)
    dt = x.dtype
    out = ad.linear_map(
        x,
        lambda v: _decode_linear(v, steps).astype(dt),
        lambda g: _decode_adjoint(g, steps).astype(dt),
    )
    return out + Tensor(np.asarray(128.0, dtype=dt))


def hiding_loss(stego_subbands, cover_subbands, quant_steps):
    """Pixel MSE between the decoded stego and cover, no rounding or clamping."""
    st = ad.as_tensor(stego_subbands)
    cv = ad.as_tensor(np.asarray(getattr(cover_subbands, "data", cover_subbands), dtype=st.dtype))
    if st.shape != cv.shape:
        raise ValueError(f"shape mismatch: {st.shape} vs {cv.shape}")
    return ad.mse(subbands_to_rgb(st, quant_steps), subbands_to_rgb(cv, quant_steps))


def revealing_loss(secret_rec, secret):
    """MSE over RGB values between recovered and true secret images."""
    rec = ad.as_tensor(secret_rec)
    ref = np.asarray(getattr(secret, "data", secret), dtype=rec.dtype)
    if rec.shape != ref.shape:
        raise ValueError(f"shape mismatch: {rec.shape} vs {ref.shape}")
    return ad.mse(rec, Tensor(ref))


def total_loss(model, cover_sub, secret_sub, secret_rgb, quant_steps):
    """Forward hide, zero-aux reveal, and both losses on the continuous path."""
    stego, _ = model.forward(cover_sub, secret_sub)
    l_hi = hiding_loss(stego, cover_sub, quant_steps)
    _, secret_rec = model.inverse(stego, None)
    l_re = revealing_loss(subbands_to_rgb(secret_rec), secret_rgb)
    return l_hi + l_re, l_hi, l_re


# ---------------------------------------------------------------- hide / reveal

def round_coefficients(subbands):
    """Round half away from zero and clamp to the baseline coefficient ranges."""
    blocks = tf.subbands_to_blocks(np.asarray(subbands, dtype=np.float64))
    q = np.sign(blocks) * np.floor(np.abs(blocks) + 0.5)
    return clamp_coefficients(q).astype(np.int32)


def hide(cover: JpegFile, secret, model: EfdrModel) -> StegoResult:
    secret = np.asarray(secret, dtype=np.float64)
    if secret.shape != (3, cover.height, cover.width):
        raise ValueError(f"secret shape {secret.shape} does not match cover "
                         f"{(3, cover.height, cover.width)}")
    coeffs = cover.coefficients
    stego_sub, r_f = model_forward(model, tf.coefficients_to_subbands(coeffs),
                                   tf.secret_to_subbands(secret))
    blocks = round_coefficients(stego_sub)
    stego = cover.with_blocks(blocks)
    cover_px = tf.decode_coefficients(coeffs.blocks, coeffs.quant_steps)
    pre_px = tf.decode_coefficients(tf.subbands_to_blocks(stego_sub.astype(np.float64)),
                                    coeffs.quant_steps)
    post_px = tf.decode_coefficients(blocks, coeffs.quant_steps)
    return StegoResult(stego, r_f, psnr(cover_px, pre_px), psnr(cover_px, post_px))


def reveal_subbands(stego: JpegFile, model: EfdrModel, aux=None):
    """Recovered (cover, secret) sub-band maps; ``aux`` defaults to all zeros."""
    st = tf.coefficients_to_subbands(stego.coefficients)
    return model_inverse(model, st, aux)


def reveal(stego: JpegFile, model: EfdrModel, aux=None):
    """Recovered secret as a (3, H, W) float RGB image clamped to [0, 255]."""
    _, secret_sub = reveal_subbands(stego, model, aux)
    return tf.subbands_to_secret(secret_sub.astype(np.float64), clamp=True)


# ---------------------------------------------------------------- training

@dataclass
class Sample:
    name: str
    cover_sub: np.ndarray     # (192, h, w) quantized coefficients
    quant_steps: np.ndarray   # (3, 8, 8)


def _split(n, fraction, rng):
    order = rng.permutation(n)
    n_val = int(round(n * fraction)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_normalization(model, cover_subs, secret_subs):
    cstd = np.concatenate([c.reshape(192, -1) for c in cover_subs], axis=1).std(axis=1)
    sstd = np.concatenate([s.reshape(192, -1) for s in secret_subs], axis=1).std(axis=1)
    model.set_normalization(cstd, sstd)


def _batch_loss(model, covers, secrets, idx_c, idx_s, dtype):
    c = np.stack([covers[i].cover_sub for i in idx_c]).astype(dtype)
    steps = np.stack([covers[i].quant_steps for i in idx_c])
    s_rgb = np.stack([secrets[j][0] for j in idx_s]).astype(dtype)
    s_sub = np.stack([secrets[j][1] for j in idx_s]).astype(dtype)
    return total_loss(model, c, s_sub, s_rgb, steps)


def train(config: TrainConfig, cover_dir, secret_dir, out_dir, model: EfdrModel | None = None,
          dtype=np.float32):
    """Train on ``cover_dir/*.jpg`` and ``secret_dir/*.png``.

    Writes ``metrics.jsonl`` (one record per epoch), ``timings.jsonl``,
    periodic ``last.ckpt`` and the final ``model.ckpt`` into ``out_dir``.
    Returns ``(model, records)``.
    """
    from .dataset import load_covers, load_secrets

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    covers = [Sample(n, tf.coefficients_to_subbands(jf.coefficients), jf.coefficients.quant_steps)
              for n, jf in load_covers(cover_dir)]
    secrets = [(rgb.astype(np.float64), tf.secret_to_subbands(rgb)) for _, rgb in load_secrets(secret_dir)]
    if not covers or not secrets:
        raise ValueError("empty dataset")
    shapes = {c.cover_sub.shape for c in covers} | {s[1].shape for s in secrets}
    if len(shapes) != 1:
        raise ValueError(f"non-uniform image sizes: {sorted(shapes)}")

    rng = np.random.default_rng(config.seed)
    tr_c, va_c = _split(len(covers), config.val_fraction, rng)
    tr_s, va_s = _split(len(secrets), config.val_fraction, rng)
    if model is None:
        model = EfdrModel(config.net, seed=config.seed, dtype=dtype)
        fit_normalization(model, [covers[i].cover_sub for i in tr_c],
                          [secrets[j][1] for j in tr_s])
    opt = ad.Adam(model.parameters(), config.lr, config.betas, config.eps, config.weight_decay)
    sched = ad.ReduceLROnPlateau(opt, config.plateau_factor, config.plateau_patience)
    pps = config.pairs_per_step
    val_pairs = list(zip(va_c, rng.permutation(va_s)[:len(va_c)])) if len(va_c) and len(va_s) else []

    records = []
    metrics_path = out_dir / "metrics.jsonl"
    timing_path = out_dir / "timings.jsonl"
    metrics_path.write_text("")
    timing_path.write_text("")
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order_c = rng.permutation(tr_c)
        pick_s = rng.permutation(tr_s)
        if len(pick_s) < len(order_c):
            pick_s = np.concatenate([pick_s, rng.choice(tr_s, len(order_c) - len(pick_s))])
        sums = np.zeros(3)
        steps = 0
        for start in range(0, len(order_c), pps):
            ic = order_c[start:start + pps]
            js = pick_s[start:start + pps]
            opt.zero_grad()
            loss, l_hi, l_re = _batch_loss(model, covers, secrets, ic, js, model.dtype)
            loss.check_finite()
            loss.backward()
            opt.step()
            sums += [float(l_hi.data), float(l_re.data), float(loss.data)]
            steps += 1
        l_hi, l_re, l_total = sums / steps
        if val_pairs:
            with ad.no_grad():
                vals = [float(_batch_loss(model, covers, secrets, [i], [j], model.dtype)[0].data)
                        for i, j in val_pairs]
            val_total = float(np.mean(vals))
        else:
            val_total = l_total
        lr_used = opt.lr
        sched.step(val_total)
        rec = {"epoch": epoch, "l_hi": l_hi, "l_re": l_re, "l_total": l_total,
               "val_l_total": val_total, "lr": lr_used}
        records.append(rec)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        wall_ms = (time.perf_counter() - t0) * 1000
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_ms": round(wall_ms, 1)}) + "\n")
        log.info("epoch %d l_hi %.4f l_re %.4f l_total %.4f val %.4f lr %.2e (%.0f ms)",
                 epoch, l_hi, l_re, l_total, val_total, lr_used, wall_ms)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / "last.ckpt", {"epoch": epoch})
    save_checkpoint(model, out_dir / "model.ckpt",
                    {"epoch": config.epochs, "train_config": config.to_dict()})
    return model, records
