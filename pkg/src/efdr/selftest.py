"""Built-in correctness checks run by ``efdr selftest``.

Each check returns ``(ok, detail)``; :func:`run_all` prints one line per check.
The checks are small versions of the test suite that need nothing beyond the
installed package and Pillow.
"""
from __future__ import annotations

import io
import math

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .gradcheck import check_op, numeric_grad, rel_error
from .jpeg_codec import parse, serialize
from .network import EfdrModel, NetConfig, model_forward, model_inverse


def _direct_dct(block):
    out = np.zeros((8, 8))
    cos = [[math.cos((2 * x + 1) * u * math.pi / 16) for x in range(8)] for u in range(8)]
    for u in range(8):
        for v in range(8):
            cu = math.sqrt((1 if u == 0 else 2) / 8)
            cv = math.sqrt((1 if v == 0 else 2) / 8)
            out[u, v] = cu * cv * sum(block[x, y] * cos[u][x] * cos[v][y]
                                      for x in range(8) for y in range(8))
    return out


def check_codec(n=8, seed=0):
    """Pillow-written baseline files survive parse -> serialize -> parse and
    decode to the same pixels in Pillow."""
    from PIL import Image

    rng = np.random.default_rng(seed)
    for i in range(n):
        h, w = 8 * rng.integers(1, 6, 2)
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, "JPEG", quality=int(rng.integers(30, 96)), subsampling=0)
        data = buf.getvalue()
        jf = parse(data)
        again = serialize(jf)
        jf2 = parse(again)
        if not np.array_equal(jf.coefficients.blocks, jf2.coefficients.blocks):
            return False, f"file {i}: coefficients changed"
        a = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
        b = np.asarray(Image.open(io.BytesIO(again)).convert("RGB"))
        if not np.array_equal(a, b):
            return False, f"file {i}: pixels changed"
    return True, f"{n} files"


def check_dct(n=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        b = rng.uniform(-128, 128, (8, 8))
        worst = max(worst, float(np.abs(tf.dct8x8(b) - _direct_dct(b)).max()))
        worst = max(worst, float(np.abs(tf.idct8x8(tf.dct8x8(b)) - b).max()))
    return worst < 1e-10, f"max error {worst:.2e}"


def check_bijectivity(seed=0):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(num_submodules=4, heads=2, dim_heads=32, dim_mlp=64, blocks_per_branch=1)
    model = EfdrModel(cfg, seed=seed)
    for name, p in model.named_parameters():
        if name != "enhance.weight":
            p.data = (p.data + rng.normal(0, 0.02, p.shape)).astype(p.data.dtype)
    c = rng.normal(size=(2, 192, 2, 2)).astype(np.float32)
    s = rng.normal(size=(2, 192, 2, 2)).astype(np.float32)
    st, rf = model_forward(model, c, s)
    c2, s2 = model_inverse(model, st, rf)
    err = float(max(np.abs(c2 - c).max(), np.abs(s2 - s).max()))
    return err < 1e-3, f"max error {err:.2e}"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    ops = {
        "matmul": (ad.matmul, [(4, 5), (5, 3)]),
        "layer_norm": (ad.layer_norm, [(3, 6), (6,), (6,)]),
        "softmax": (ad.softmax, [(3, 5)]),
        "gelu": (ad.gelu, [(3, 4)]),
        "soft_clamp": (lambda x: ad.soft_clamp(x, 2.0), [(3, 4)]),
        "conv1x1": (ad.conv1x1, [(4, 2, 2), (4, 4)]),
        "inverse": (ad.inverse, None),
    }
    worst = {}
    for name, (op, shapes) in ops.items():
        if shapes is None:
            args = [np.eye(4) + 0.3 * rng.normal(size=(4, 4))]
        else:
            args = [rng.normal(size=s) for s in shapes]
        worst[name] = check_op(op, *args)
    net_err = _network_gradient_error(rng)
    bad = [k for k, v in worst.items() if v >= 1e-4]
    ok = not bad and net_err < 1e-3
    return ok, f"worst op {max(worst.values()):.1e} network {net_err:.1e}" + (f" failing {bad}" if bad else "")


def _network_gradient_error(rng):
    cfg = NetConfig(num_submodules=1, heads=2, dim_heads=8, dim_mlp=8, blocks_per_branch=1)
    model = EfdrModel(cfg, seed=1, dtype=np.float64)
    for name, p in model.named_parameters():
        if name != "enhance.weight":
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    c = rng.normal(size=(1, 192, 1, 2))
    s = rng.normal(size=(1, 192, 1, 2))

    def loss():
        st, rf = model.forward(ad.Tensor(c), ad.Tensor(s))
        return ad.sum(ad.mul(st, st) + ad.mul(rf, rf))

    loss().backward()
    worst = 0.0
    for name in ("sub0.phi.block0.wq", "sub0.psi.head_w", "sub0.upsilon.block0.w1"):
        p = dict(model.named_parameters())[name]
        idx = rng.choice(p.data.size, size=10, replace=False)

        def scalar(*_):
            with ad.no_grad():
                return float(loss().data)

        num = numeric_grad(scalar, [p.data], 0, h=1e-5, entries=idx)
        worst = max(worst, rel_error(num, p.grad.reshape(-1)[idx]))
    return worst


CHECKS = [
    ("codec round trip", check_codec),
    ("dct oracle", check_dct),
    ("bijectivity", check_bijectivity),
    ("gradient checks", check_gradients),
]


def run_all(emit=print):
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        ok_all &= ok
    return ok_all
