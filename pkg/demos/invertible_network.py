"""
An invertible hiding network
============================

The network takes a cover's sub-band maps and a secret's sub-band maps and
returns two maps of the same size: the stego maps and a left-over tensor r_f.
Because every layer is invertible, feeding the stego maps and the true r_f
backwards returns both inputs. At reveal time r_f is unknown and replaced by
zeros; training teaches the network to make that substitution harmless.
"""
import numpy as np
import skimage.data

from efdr import transforms as tf
from efdr.dataset import encode_cover
from efdr.network import EfdrModel, NetConfig, model_forward, model_inverse
from efdr.pipeline import fit_normalization

cover_rgb = skimage.data.chelsea()[:64, :64].transpose(2, 0, 1).astype(float)
secret_rgb = skimage.data.coffee()[:64, :64].transpose(2, 0, 1).astype(float)
cover = tf.coefficients_to_subbands(encode_cover(cover_rgb, 75).coefficients)
secret = tf.secret_to_subbands(secret_rgb)

# a small network with the same structure as the full one
cfg = NetConfig(num_submodules=4, heads=4, dim_heads=128, dim_mlp=256, blocks_per_branch=1)
model = EfdrModel(cfg, seed=0)
fit_normalization(model, [cover], [secret])
print("parameters:", sum(p.data.size for p in model.parameters()))

# freshly built, the coupling branches output zeros: only the 1x1 mixing acts
stego, r_f = model_forward(model, cover, secret)
print("stego vs cover, max change:", np.abs(stego - cover).max())

# give the branch heads random weights so the couplings do real work
rng = np.random.default_rng(1)
for name, p in model.named_parameters():
    if ".head_" in name:
        p.data = rng.normal(0, 0.005, p.shape).astype(np.float32)
        p.version += 1
stego, r_f = model_forward(model, cover, secret)

# backwards with the true r_f: exact up to float32 rounding
cover_back, secret_back = model_inverse(model, stego, r_f)
print("round trip error, cover:", np.abs(cover_back - cover).max())
print("round trip error, secret:", np.abs(secret_back - secret).max())

# backwards with zeros instead of r_f: an untrained network recovers little
_, guess = model_inverse(model, stego)
rec = tf.subbands_to_secret(guess)
print("secret recovered from zeros, mean abs error:", np.abs(rec - secret_rgb).mean())
