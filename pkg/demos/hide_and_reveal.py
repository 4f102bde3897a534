"""
Training a small hider and using it
===================================

A complete desk-sized session: cut 64x64 tiles out of the scikit-image sample
pictures, prepare covers and secrets, train a reduced network for a few
epochs, then hide one picture in another and get it back from the JPEG alone.
Takes a couple of minutes on one CPU core; raise EPOCHS for better results.
"""
import logging
import tempfile
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image

from efdr.dataset import prepare_dataset, read_manifest, read_rgb
from efdr.jpeg_codec import read_jpeg
from efdr.metrics import evaluate_pairs
from efdr.network import EfdrModel, NetConfig
from efdr.pipeline import TrainConfig, hide, reveal, train

EPOCHS = 8
logging.basicConfig(level=logging.INFO, format="%(message)s")
work = Path(tempfile.mkdtemp(prefix="efdr-demo-"))

# tiles from a few sample pictures
src = work / "src"
src.mkdir()
rng = np.random.default_rng(0)
pictures = [skimage.data.astronaut(), skimage.data.chelsea(), skimage.data.coffee(),
            skimage.data.rocket()]
for i in range(40):
    pic = pictures[i % len(pictures)]
    y, x = rng.integers(0, pic.shape[0] - 64), rng.integers(0, pic.shape[1] - 64)
    Image.fromarray(pic[y:y + 64, x:x + 64]).save(src / f"tile{i:02d}.png")

summary = prepare_dataset(src, work / "data", qf=75, crop=64)
print(f"prepared {summary.written} covers and secrets in {work / 'data'}")

net = NetConfig(num_submodules=4, heads=4, dim_heads=128, dim_mlp=256, blocks_per_branch=1)
config = TrainConfig(epochs=EPOCHS, net=net, seed=0)
model, records = train(config, work / "data" / "covers", work / "data" / "secrets", work / "run")
print(f"L_total went from {records[0]['l_total']:.0f} to {records[-1]['l_total']:.0f}")

# hide one tile in another; only the stego JPEG is needed to reveal
cover_path, secret_path = read_manifest(work / "data")[0]
result = hide(read_jpeg(cover_path), read_rgb(secret_path), model)
print("cover/stego PSNR before and after integer rounding:",
      f"{result.prequant_psnr:.2f} / {result.postquant_psnr:.2f} dB")
recovered = reveal(result.stego_jpeg, model)
Image.fromarray(np.clip(recovered + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)).save(work / "revealed.png")

# compare against a network that hides nothing
pairs = [(read_jpeg(c), read_rgb(s)) for c, s in read_manifest(work / "data")[:8]]
_, trained = evaluate_pairs(model, pairs)
_, untouched = evaluate_pairs(EfdrModel(NetConfig(num_submodules=1, enhance_init="identity")), pairs)
print(f"secret recovery PSNR: trained {trained['psnr_sr']:.2f} dB, "
      f"identity network {untouched['psnr_sr']:.2f} dB")
print("outputs in", work)
