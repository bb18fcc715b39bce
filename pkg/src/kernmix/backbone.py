"""Small trainable embedding networks and an SGD-with-momentum optimizer."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import numerics as nx
from .numerics import Tensor

STANDARD_SPECS: dict[str, dict[str, Any]] = {
    "mlp-small": {"kind": "mlp", "hidden": [128, 64]},
    "conv-tiny": {"kind": "conv", "channels": [8, 16]},
}


class NetSpecError(ValueError):
    pass


def resolve_spec(net_spec, input_shape) -> dict:
    """Expand a named spec (``"mlp-small"``) or dict into a full layer description."""
    if isinstance(net_spec, str):
        if net_spec not in STANDARD_SPECS:
            raise NetSpecError(f"unknown net spec {net_spec!r}")
        spec = dict(STANDARD_SPECS[net_spec], name=net_spec)
    else:
        spec = dict(net_spec)
    spec["input_shape"] = [int(s) for s in (spec.get("input_shape") or input_shape)]
    if spec.get("kind") not in ("mlp", "conv"):
        raise NetSpecError(f"net spec kind must be 'mlp' or 'conv', got {spec.get('kind')!r}")
    if spec["kind"] == "conv" and len(spec["input_shape"]) != 3:
        raise NetSpecError("conv nets need an (H, W, C) input shape")
    sizes = spec.get("hidden", []) + spec.get("channels", [])
    if not spec["input_shape"] or any(s < 1 for s in spec["input_shape"] + sizes):
        raise NetSpecError(f"layer sizes must be positive: {spec}")
    return spec


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class EmbeddingNet:
    spec: dict
    d: int
    c: int | None
    seed: int
    trunk: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    embed_head: tuple[Tensor, Tensor] | None = None
    logit_head: tuple[Tensor, Tensor] | None = None
    normalize: bool = False

    @property
    def parameters(self) -> list[Tensor]:
        ps = [p for layer in self.trunk for p in layer]
        ps += list(self.embed_head)
        if self.logit_head is not None:
            ps += list(self.logit_head)
        return ps

    def parameter_count(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters]))

    def trunk_features(self, x) -> Tensor:
        h = nx.tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x)
        shape = tuple(self.spec["input_shape"])
        if h.shape[1:] != shape and int(np.prod(h.shape[1:])) != int(np.prod(shape)):
            raise nx.ShapeError("forward", h.shape, (None, *shape))
        if self.spec["kind"] == "conv":
            h = nx.reshape(h, (h.shape[0], *shape))
            for w, b in self.trunk:
                h = nx.max_pool2d(nx.relu(nx.conv2d(h, w, b, padding=1)), 2)
            return nx.reshape(h, (h.shape[0], -1))
        h = nx.reshape(h, (h.shape[0], -1))
        for w, b in self.trunk:
            h = nx.relu(nx.add(nx.matmul(h, w), b))
        return h

    def __call__(self, x):
        return forward(self, x)


def build(net_spec, d: int, c: int | None, seed: int, input_shape=None,
          normalize: bool = False) -> EmbeddingNet:
    """Build a net with He-style uniform fan-in initialisation and zero biases."""
    if d < 1:
        raise NetSpecError(f"embedding dimension must be >= 1, got {d}")
    if c is not None and c < 1:
        raise NetSpecError(f"class count must be >= 1, got {c}")
    spec = resolve_spec(net_spec, input_shape)
    rng = np.random.default_rng(seed)
    net = EmbeddingNet(spec, d, c, seed, normalize=normalize)
    if spec["kind"] == "mlp":
        width = int(np.prod(spec["input_shape"]))
        for h in spec["hidden"]:
            net.trunk.append((_uniform(rng, width, (width, h)), Tensor(np.zeros(h), True)))
            width = h
    else:
        H, W, cin = spec["input_shape"]
        for cout in spec["channels"]:
            net.trunk.append((_uniform(rng, 9 * cin, (3, 3, cin, cout)),
                              Tensor(np.zeros(cout), True)))
            cin, H, W = cout, H // 2, W // 2
        if H < 1 or W < 1:
            raise NetSpecError("input too small for the number of pooling blocks")
        width = H * W * cin
    net.embed_head = (_uniform(rng, width, (width, d)), Tensor(np.zeros(d), True))
    if c is not None:
        net.logit_head = (_uniform(rng, width, (width, c)), Tensor(np.zeros(c), True))
    return net


def forward(net: EmbeddingNet, inputs) -> tuple[Tensor, Tensor | None]:
    """Return (embeddings (B, d), logits (B, c) or None)."""
    h = net.trunk_features(inputs)
    w, b = net.embed_head
    emb = nx.add(nx.matmul(h, w), b)
    if net.normalize:
        norm = nx.sqrt(nx.add(nx.sum(nx.mul(emb, emb), axis=1, keepdims=True), 1e-12))
        emb = nx.div(emb, norm)
    logits = None
    if net.logit_head is not None:
        w, b = net.logit_head
        logits = nx.add(nx.matmul(h, w), b)
    return emb, logits


def embed(net: EmbeddingNet, inputs, batch_size: int = 1024) -> np.ndarray:
    """Embeddings without building a gradient graph."""
    out = []
    for s in range(0, len(inputs), batch_size):
        out.append(_frozen_forward(net, inputs[s:s + batch_size])[0])
    return np.concatenate(out) if out else np.zeros((0, net.d))


def logits_of(net: EmbeddingNet, inputs, batch_size: int = 1024) -> np.ndarray:
    out = [_frozen_forward(net, inputs[s:s + batch_size])[1]
           for s in range(0, len(inputs), batch_size)]
    return np.concatenate(out)


def _frozen_forward(net, x):
    flags = [p.requires_grad for p in net.parameters]
    for p in net.parameters:
        p.requires_grad = False
    try:
        emb, logits = forward(net, x)
    finally:
        for p, f in zip(net.parameters, flags):
            p.requires_grad = f
    return emb.data, None if logits is None else logits.data


# -- optimisation ------------------------------------------------------------

@dataclass
class Optimizer:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def step(opt: Optimizer, params) -> None:
    """v <- mu v + g ;  p <- p - lr (v + wd p)."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p!r} has no gradient; run backward first")
    for p in params:
        v = opt.velocity.get(id(p))
        v = p.grad.copy() if v is None else opt.momentum * v + p.grad
        opt.velocity[id(p)] = v
        p.data = p.data - opt.learning_rate * (v + opt.weight_decay * p.data)


# -- checkpoints -------------------------------------------------------------

def _blob(params) -> bytes:
    return b"".join(p.data.astype("<f8").tobytes() for p in params)


def save_checkpoint(net: EmbeddingNet, path, extra: dict | None = None) -> None:
    blob = _blob(net.parameters)
    header = {
        "spec": net.spec, "d": net.d, "c": net.c, "seed": net.seed,
        "normalize": net.normalize,
        "shapes": [list(p.shape) for p in net.parameters],
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(blob)


def load_checkpoint(path) -> tuple[EmbeddingNet, dict]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + hlen])
    blob = raw[4 + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: parameter checksum mismatch")
    net = build(header["spec"], header["d"], header["c"], header["seed"],
                normalize=header["normalize"])
    off = 0
    for p, shape in zip(net.parameters, header["shapes"]):
        n = int(np.prod(shape))
        p.data = np.frombuffer(blob, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: parameter blob has trailing bytes")
    return net, header["extra"]
