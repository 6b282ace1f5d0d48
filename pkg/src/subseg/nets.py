"""Tiny encoder-decoder segmentation net with a projection head.

Two stride-2 downsamplings (so H and W must be divisible by 4), skip
concatenations on the way up, a 1x1 classifier head to C logits, and a
two-layer 1x1 projection head to D-dimensional per-pixel embeddings,
L2-normalized inside the graph. A teacher copy of the student is maintained
with an exponential moving average of the parameters.

Checkpoints are a flat binary: magic "SPCK", version u32, then per tensor
name length u32, utf-8 name, rank u32, dims u32 each, float64 payload.
Little-endian throughout.
"""

from __future__ import annotations

import struct

import numpy as np

from subseg import autodiff as ad

MAGIC = b"SPCK"
VERSION = 1

__all__ = [
    "ModelParams",
    "NetworkOutput",
    "init_params",
    "forward",
    "pseudo_label",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class ModelParams:
    """Named, ordered parameter tensors; student and teacher share names."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    @property
    def num_classes(self):
        return self._tensors["cls.w"].shape[0]

    @property
    def embed_dim(self):
        return self._tensors["proj2.w"].shape[0]

    def copy(self, requires_grad=False):
        return ModelParams({
            name: ad.Tensor(t.data.copy(), requires_grad=requires_grad)
            for name, t in self._tensors.items()})

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def l2_gap(self, other):
        """Euclidean distance between two parameter sets, for EMA checks."""
        total = 0.0
        for name, t in self._tensors.items():
            d = t.data - other[name].data
            total += float(np.sum(d * d))
        return float(np.sqrt(total))


def _conv_shapes(num_classes, embed_dim):
    # name -> (shape, fan_in); fan_in drives the He scale
    return {
        "enc1": ((16, 1, 3, 3), 9),
        "down1": ((16, 16, 3, 3), 144),
        "enc2": ((32, 16, 3, 3), 144),
        "down2": ((32, 32, 3, 3), 288),
        "mid": ((32, 32, 3, 3), 288),
        "up1": ((32, 32, 2, 2), 128),
        "dec1": ((16, 64, 3, 3), 576),
        "up2": ((16, 16, 2, 2), 64),
        "dec2": ((16, 32, 3, 3), 288),
        "cls": ((num_classes, 16, 1, 1), 16),
        "proj1": ((32, 16, 1, 1), 16),
        "proj2": ((embed_dim, 32, 1, 1), 32),
    }


def init_params(num_classes, embed_dim=32, seed=0, requires_grad=True):
    """He-scaled random initialization, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, fan_in) in _conv_shapes(num_classes, embed_dim).items():
        scale = np.sqrt(2.0 / fan_in)
        tensors[name + ".w"] = ad.Tensor(
            rng.normal(size=shape) * scale, requires_grad=requires_grad)
        bias_len = shape[1] if name.startswith("up") else shape[0]
        tensors[name + ".b"] = ad.Tensor(
            np.zeros(bias_len), requires_grad=requires_grad)
    return ModelParams(tensors)


class NetworkOutput:
    """Full-resolution logits, softmax probabilities, and unit embeddings."""

    def __init__(self, logits, probabilities, embeddings):
        self.logits = logits
        self.probabilities = probabilities
        self.embeddings = embeddings


def forward(params, images):
    """Run the network on [N, 1, H, W] images (or a single [1, H, W])."""
    single = False
    data = images.data if isinstance(images, ad.Tensor) else np.asarray(images)
    if data.ndim == 3:
        data = data[None]
        single = True
    if data.ndim != 4 or data.shape[1] != 1:
        raise ValueError("expected [N, 1, H, W] images, got {}".format(data.shape))
    n, _, h, w = data.shape
    if h % 4 or w % 4:
        raise ValueError("H and W must be divisible by 4, got {}x{}".format(h, w))
    x = images if isinstance(images, ad.Tensor) else ad.Tensor(data)
    if single and isinstance(images, ad.Tensor):
        x = ad.reshape(x, (1,) + images.shape)

    p = params
    e1 = ad.relu(ad.conv2d(x, p["enc1.w"], p["enc1.b"], padding=1))
    d1 = ad.relu(ad.conv2d(e1, p["down1.w"], p["down1.b"], stride=2, padding=1))
    e2 = ad.relu(ad.conv2d(d1, p["enc2.w"], p["enc2.b"], padding=1))
    d2 = ad.relu(ad.conv2d(e2, p["down2.w"], p["down2.b"], stride=2, padding=1))
    m = ad.relu(ad.conv2d(d2, p["mid.w"], p["mid.b"], padding=1))
    u1 = ad.conv2d_transpose(m, p["up1.w"], p["up1.b"])
    c1 = ad.relu(ad.conv2d(ad.concat([u1, e2], axis=1),
                           p["dec1.w"], p["dec1.b"], padding=1))
    u2 = ad.conv2d_transpose(c1, p["up2.w"], p["up2.b"])
    c2 = ad.relu(ad.conv2d(ad.concat([u2, e1], axis=1),
                           p["dec2.w"], p["dec2.b"], padding=1))

    logits = ad.conv2d(c2, p["cls.w"], p["cls.b"])
    probs = ad.softmax(logits, axis=1)
    proj = ad.relu(ad.conv2d(c2, p["proj1.w"], p["proj1.b"]))
    emb = ad.l2_normalize(ad.conv2d(proj, p["proj2.w"], p["proj2.b"]), axis=1)

    if single:
        shape3 = lambda t: ad.reshape(t, t.shape[1:])
        return NetworkOutput(shape3(logits), shape3(probs), shape3(emb))
    return NetworkOutput(logits, probs, emb)


def pseudo_label(output):
    """(labels, confidence) from teacher probabilities; argmax ties pick the
    lowest class index; both outputs are detached plain arrays."""
    probs = output.probabilities.data if isinstance(output, NetworkOutput) else \
        np.asarray(output)
    axis = 0 if probs.ndim == 3 else 1
    labels = np.argmax(probs, axis=axis)
    confidence = np.max(probs, axis=axis)
    return labels, confidence


def ema_update(teacher, student, beta):
    """In place: teacher <- beta * teacher + (1 - beta) * student."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    t_names = teacher.names()
    if t_names != student.names():
        raise ValueError("teacher/student parameter names differ")
    for name in t_names:
        t, s = teacher[name], student[name]
        if t.data.shape != s.data.shape:
            raise ValueError("shape mismatch at {}: {} vs {}".format(
                name, t.data.shape, s.data.shape))
        t.data *= beta
        t.data += (1.0 - beta) * s.data


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<I", d))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path, requires_grad=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic {!r}".format(blob[:4]))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError("unknown version {}".format(version))
    off = 8
    tensors = {}
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CheckpointError("truncated name")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from("<{}I".format(rank), blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            if off + 8 * count > len(blob):
                raise CheckpointError(
                    "truncated tensor payload for {}".format(name))
            payload = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
        except struct.error as exc:
            raise CheckpointError("truncated checkpoint") from exc
        tensors[name] = ad.Tensor(
            payload.astype(np.float64).reshape(dims), requires_grad=requires_grad)
    if not tensors:
        raise CheckpointError("checkpoint holds no tensors")
    return ModelParams(tensors)
