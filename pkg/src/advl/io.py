"""Dataset ingestion, synthetic data, and the binary model file."""

import gzip
import struct
import zlib
from pathlib import Path

import numpy as np

from advl.network import LAYER_KINDS, LayerSpec, Network
from advl.training import LabeledDataset

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MODEL_MAGIC = b"ADVL"
MODEL_VERSION = 1


class IngestionError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path, self.offset = str(path), offset


class ModelFormatError(ValueError):
    pass


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise IngestionError(path, 0, f"corrupt gzip stream: {exc}") from exc
    return raw


def _parse_idx(raw, path, magic, ndim):
    if len(raw) < 4:
        raise IngestionError(path, 0, "truncated magic number")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise IngestionError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IngestionError(path, 4, "truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise IngestionError(path, head, f"truncated payload: need {need} bytes, "
                                         f"found {len(raw) - head}")
    if len(raw) - head > need:
        raise IngestionError(path, head + need, "trailing bytes after payload")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=need, offset=head)


def load_idx(image_path, label_path, classes=10):
    """Read an IDX image/label pair (optionally gzipped) into a dataset.

    Images come back as ``N x 1 x H x W`` float64 with bytes scaled by 1/255.
    """
    dims, pix = _parse_idx(_read_bytes(image_path), image_path, IDX_IMAGE_MAGIC, 3)
    (n_lab,), lab = _parse_idx(_read_bytes(label_path), label_path, IDX_LABEL_MAGIC, 1)
    n, h, w = dims
    if n != n_lab:
        raise IngestionError(label_path, 4, f"label count {n_lab} != image count {n}")
    if lab.size and lab.max() >= classes:
        bad = int(np.argmax(lab >= classes))
        raise IngestionError(label_path, 8 + bad, f"label {lab[bad]} out of range")
    images = pix.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return LabeledDataset(images, lab.astype(np.int64), classes)


def save_idx(data, image_path, label_path):
    """Write a dataset back out as IDX (gzipped when the name ends in .gz)."""
    imgs = np.rint(np.asarray(data.images) * 255).astype(np.uint8)
    n = len(imgs)
    h, w = imgs.shape[-2:]
    img_raw = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + imgs.reshape(n, h, w).tobytes()
    lab_raw = struct.pack(">II", IDX_LABEL_MAGIC, n) + np.asarray(data.labels, np.uint8).tobytes()
    for path, raw in ((image_path, img_raw), (label_path, lab_raw)):
        path = Path(path)
        if path.suffix == ".gz":
            raw = gzip.compress(raw, mtime=0)
        path.write_bytes(raw)


def load_cifar_batch(path):
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = _read_bytes(path)
    rec = 1 + 3 * 32 * 32
    if len(raw) % rec:
        raise IngestionError(path, len(raw) - len(raw) % rec, "truncated record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return LabeledDataset(arr[:, 1:].reshape(-1, 3, 32, 32) / 255.0, arr[:, 0].astype(np.int64), 10)


def synth_blobs(classes, per_class, dims, separation, seed=0, spread=0.05):
    """Gaussian clusters clamped to ``[0, 1]``, ``per_class`` samples each.

    ``dims`` is an int (flat samples) or an image shape such as ``(1, 8, 8)``.
    Cluster centres are drawn at pairwise distance ``separation * spread``
    along orthogonal directions, so ``separation`` is measured in units of the
    per-pixel noise level ``spread``.
    """
    if classes < 2 or not separation > 0:
        raise ValueError("need at least two classes and a positive separation")
    shape = (dims,) if np.isscalar(dims) else tuple(dims)
    n = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.standard_normal((n, classes)))[0].T if n >= classes else None
    if basis is None:
        raise ValueError("dims must be at least the number of classes")
    centers = 0.5 + basis * (separation * spread / np.sqrt(2))
    labels = np.repeat(np.arange(classes), per_class)
    pts = centers[labels] + spread * rng.standard_normal((len(labels), n))
    pts = np.clip(pts, 0.0, 1.0).reshape((len(labels),) + shape)
    return LabeledDataset(pts, labels, classes)


# --- model file ------------------------------------------------------------

def model_to_bytes(net):
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    out.append(struct.pack("<I", len(net.input_shape)))
    out.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    out.append(struct.pack("<dI", net.temperature, len(net.layers)))
    for spec in net.layers:
        out.append(struct.pack("<BII", LAYER_KINDS.index(spec.kind), spec.size, spec.kernel))
    for p in net.params:
        for arr in p or ():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    payload = b"".join(out)
    return payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(raw):
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("not an ADVL model file")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        (nd,) = take("<I")
        input_shape = take(f"<{nd}I")
        temperature, n_layers = take("<dI")
        layers = []
        for _ in range(n_layers):
            kind, size, kernel = take("<BII")
            layers.append(LayerSpec(LAYER_KINDS[kind], size, kernel))
        params = []
        for spec in layers:
            if spec.kind in ("maxpool", "flatten"):
                params.append(None)
                continue
            pair = []
            for _ in range(2):
                (ndim,) = take("<I")
                shape = take(f"<{ndim}I")
                count = int(np.prod(shape))
                arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos)
                pos += 8 * count
                pair.append(arr.reshape(shape).astype(np.float64))
            params.append(tuple(pair))
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model payload at byte {pos}: {exc}") from exc
    if pos != len(payload):
        raise ModelFormatError("trailing bytes in model payload")
    return Network(input_shape, layers, params, temperature)


def save_model(net, path):
    Path(path).write_bytes(model_to_bytes(net))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
