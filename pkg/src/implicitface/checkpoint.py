"""Binary checkpoint container for named float32 tensors.

Layout (little-endian): magic "JIFF", format_version u32, entry count u32,
then per entry: name length u32, UTF-8 name, rank u32, extents u32 each,
raw float32 data.
"""

import struct

import numpy as np

MAGIC = b"JIFF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write an ordered {name: array} mapping; values are stored as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_tensors(path):
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown format_version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return tensors


def save_networks(path, nets):
    """Persist the parameters of a list of Networks."""
    tensors = {}
    for net in nets:
        for name, arr in net.parameters():
            tensors[name] = arr
    save_tensors(path, tensors)


def load_networks(path, nets):
    """Load parameters back into `nets` in place; shapes must match."""
    tensors = load_tensors(path)
    for net in nets:
        for name, arr in net.parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint "
                    f"{tensors[name].shape} vs network {arr.shape}")
            arr[...] = tensors[name]
    return nets
