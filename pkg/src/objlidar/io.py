"""Binary point-cloud and range-image files."""
import struct

import numpy as np

from .errors import ValidationError

RANGE_MAGIC = b"OLRI"


def write_cloud(path, cloud):
    """KITTI-style ``.bin``: consecutive little-endian float32 (x, y, z, i)."""
    np.asarray(cloud, dtype="<f4").reshape(-1, 4).tofile(path)


def read_cloud(path):
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValidationError(f"{path}: size is not a multiple of 16 bytes")
    return raw.reshape(-1, 4).astype(np.float64)


def write_range_image(path, img):
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValidationError(f"range image must be (H, W, C), got {img.shape}")
    H, W, C = img.shape
    with open(path, "wb") as fh:
        fh.write(RANGE_MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_range_image(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != RANGE_MAGIC or len(data) < 16:
        raise ValidationError(f"{path}: not a range-image file")
    H, W, C = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != H * W * C:
        raise ValidationError(f"{path}: expected {H * W * C} floats, found {body.size}")
    return body.reshape(H, W, C).astype(np.float64)
