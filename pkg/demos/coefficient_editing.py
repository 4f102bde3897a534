"""
Editing a JPEG without recompressing it
=======================================

A baseline JPEG stores integers: quantized DCT coefficients. This walk-through
opens one, looks at it as sub-band maps, changes a single coefficient and
writes the file back. Nothing else in the file moves.
"""
import io

import numpy as np
import skimage.data
from PIL import Image

from efdr import transforms as tf
from efdr.jpeg_codec import parse, serialize

# a 4:4:4 baseline JPEG written by libjpeg through Pillow
img = skimage.data.astronaut()[:128, :128]
buf = io.BytesIO()
Image.fromarray(img).save(buf, "JPEG", quality=75, subsampling=0)
jf = parse(buf.getvalue())
print("blocks per channel:", jf.coefficients.blocks.shape[1:3])
print("luma quant table, first row:", jf.quant_tables[0][0])

# every (channel, u, v) frequency becomes one 16x16 map: 3 * 64 = 192 maps
maps = tf.coefficients_to_subbands(jf.coefficients)
print("sub-band maps:", maps.shape)
print("luma DC map (top-left 4x4):\n", maps[0, :4, :4])

# most energy sits in a handful of low frequencies
energy = (maps.astype(float) ** 2).reshape(192, -1).sum(1)
top = np.argsort(energy)[::-1][:5]
for k in top:
    c, u, v = k // 64, (k % 64) // 8, k % 8
    print(f"channel {'YCbCr'[c] if c == 0 else ('Cb', 'Cr')[c - 1]:>2} (u={u}, v={v}): {energy[k]:.0f}")

# bump one mid-frequency luma coefficient in one block and write the file again
blocks = jf.coefficients.blocks.copy()
blocks[0, 3, 5, 2, 1] += 1
edited = parse(serialize(jf.with_blocks(blocks)))
diff = edited.coefficients.blocks - jf.coefficients.blocks
print("coefficients changed:", np.count_nonzero(diff))

# the pixel effect of that +1 is a faint 8x8 cosine pattern in one block
before = tf.decode_rgb(jf.coefficients).astype(int)
after = tf.decode_rgb(edited.coefficients).astype(int)
changed = np.argwhere(np.any(before != after, axis=0))
print("pixels touched: rows", changed[:, 0].min(), "-", changed[:, 0].max(),
      "cols", changed[:, 1].min(), "-", changed[:, 1].max())
