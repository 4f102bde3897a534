"""Corpus builders shared by the test modules and the acceptance run."""
import io
import os
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).parent
REFERENCE_SRC = HERE / "reference" / "jpegcoef.c"

NATURAL = ["astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field",
           "immunohistochemistry", "retina", "colorwheel"]


def natural_images():
    import skimage.data
    return [np.asarray(getattr(skimage.data, n)())[..., :3] for n in NATURAL]


def natural_tiles(size, count, scale=3, seed=0):
    """``count`` RGB tiles (H, W, 3) of side ``size`` cut from downscaled sample images."""
    rng = np.random.default_rng(seed)
    pool = []
    for img in natural_images():
        im = Image.fromarray(img)
        im = im.resize((max(size, im.width // scale), max(size, im.height // scale)), Image.LANCZOS)
        pool.append(np.asarray(im))
    tiles = []
    while len(tiles) < count:
        src = pool[len(tiles) % len(pool)]
        y = rng.integers(0, src.shape[0] - size + 1)
        x = rng.integers(0, src.shape[1] - size + 1)
        tiles.append(src[y:y + size, x:x + size].copy())
    return tiles


def jpeg_corpus(n=60, seed=0):
    """Baseline 4:4:4 JPEGs made by libjpeg (via Pillow) with varied settings."""
    rng = np.random.default_rng(seed)
    sizes = [(8, 8), (16, 24), (64, 64), (48, 128), (128, 128), (96, 40)]
    files = []
    tiles = natural_tiles(128, n, scale=2, seed=seed)
    for i in range(n):
        h, w = sizes[i % len(sizes)]
        kind = i % 4
        if kind == 3:
            img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        else:
            img = tiles[i][:h, :w]
        kw = {"quality": int(rng.choice([10, 30, 50, 75, 90, 95, 100])), "subsampling": 0}
        if i % 5 == 1:
            kw["optimize"] = True
        if i % 7 == 2:
            kw["restart_marker_blocks"] = int(rng.integers(1, 5))
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, "JPEG", **kw)
        files.append((f"corpus{i:03d}_q{kw['quality']}", buf.getvalue()))
    return files


def _compile(src, name):
    cc = shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        return None
    out = Path(tempfile.gettempdir()) / f"efdr_{name}_{os.getuid()}"
    if not out.exists() or out.stat().st_mtime < src.stat().st_mtime:
        res = subprocess.run([cc, "-O2", "-o", str(out), str(src), "-ljpeg"], capture_output=True)
        if res.returncode != 0:
            return None
    return out


def reference_decoder():
    """Path to a compiled libjpeg coefficient dumper, or None when no toolchain."""
    return _compile(REFERENCE_SRC, "jpegcoef")


def reference_coefficients(exe, data: bytes):
    """(blocks (3, bh, bw, 8, 8), quant steps (3, 8, 8)) as decoded by libjpeg."""
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.jpg"
        dst = Path(tmp) / "out.bin"
        src.write_bytes(data)
        subprocess.run([str(exe), str(src), str(dst)], check=True)
        raw = dst.read_bytes()
    ncomp = int(np.frombuffer(raw[:4], "<i4")[0])
    off = 4
    blocks, steps = [], []
    for _ in range(ncomp):
        rows, cols = np.frombuffer(raw[off:off + 8], "<i4")
        off += 8
        steps.append(np.frombuffer(raw[off:off + 128], "<u2").reshape(8, 8))
        off += 128
        n = rows * cols * 64
        blocks.append(np.frombuffer(raw[off:off + 2 * n], "<i2").reshape(rows, cols, 8, 8))
        off += 2 * n
    return np.stack(blocks).astype(np.int32), np.stack(steps).astype(np.int32)


def make_source_dir(path, size, count, seed=0):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, tile in enumerate(natural_tiles(size, count, seed=seed)):
        Image.fromarray(tile).save(path / f"img{i:03d}.png")
    return path
