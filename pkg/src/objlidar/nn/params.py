"""Named parameter storage, initialization and the binary checkpoint format."""
import struct

import numpy as np

from ..errors import CheckpointError
from .autograd import Tensor

CHECKPOINT_MAGIC = b"OLDM"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered mapping of parameter name to array, with parallel gradients.

    ``init`` records how each entry was initialized (``"zeros"`` or
    ``"uniform"``) so zero-convolution layers can be identified.
    """

    def __init__(self):
        self.values = {}
        self.grads = {}
        self.init = {}

    def add(self, name, shape, init, rng, fan_in=None):
        if name in self.values:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            bound = np.sqrt(1.0 / max(fan_in, 1))
            value = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.values[name] = value
        self.grads[name] = np.zeros(shape)
        self.init[name] = init
        return value

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def __len__(self):
        return len(self.values)

    def names(self, prefix=""):
        return [n for n in self.values if n.startswith(prefix)]

    def n_params(self):
        return sum(v.size for v in self.values.values())

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def leaves(self):
        """Fresh autograd leaves for one forward/backward pass."""
        return {n: Tensor(v, requires_grad=True) for n, v in self.values.items()}

    def collect(self, leaves, scale=1.0):
        """Add leaf gradients (times ``scale``) into the gradient slots."""
        for n, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[n] += scale * leaf.grad

    def copy(self):
        out = ParamStore()
        out.values = {n: v.copy() for n, v in self.values.items()}
        out.grads = {n: g.copy() for n, g in self.grads.items()}
        out.init = dict(self.init)
        return out

    def merge(self, other):
        for n in other.values:
            if n in self.values:
                raise CheckpointError(f"duplicate parameter name {n!r}")
        self.values.update(other.values)
        self.grads.update(other.grads)
        self.init.update(other.init)
        return self

    def randomize(self, rng, scale=0.5):
        """Overwrite every entry with uniform noise, zero-initialized layers included."""
        for n, v in self.values.items():
            v[...] = rng.uniform(-scale, scale, size=v.shape)


def save_checkpoint(path, params):
    """Write ``params`` as float32 tensors.

    Layout: ``OLDM``, u32 version, u32 count, then per tensor u32 name
    length, UTF-8 name, u32 rank, u64 dims, little-endian float32 data.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.values)))
        for name, value in params.values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64)
            pos += 4 * size
            store.values[name] = arr.reshape(shape)
            store.grads[name] = np.zeros(shape)
            store.init[name] = "loaded"
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return store
