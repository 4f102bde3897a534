"""Hide RGB images inside JPEG files by editing quantized DCT coefficients
with an invertible transformer network."""
from .jpeg_codec import JpegFile, read_jpeg, write_jpeg
from .network import EfdrModel, NetConfig, load_checkpoint, save_checkpoint
from .pipeline import TrainConfig, hide, reveal, train

__version__ = "0.1.0"
