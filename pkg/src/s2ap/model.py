"""Prunable MLPs carrying weights, importance scores and top-k masks."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, ShapeError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPCHK1\n"

# Reference architectures for the two desk substrates.
MOONS_ARCH = (2, 32, 32, 2)
IDX_ARCH = (784, 128, 64, 10)


def retained_count(size: int, sparsity: float) -> int:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    return max(1, int(round((1.0 - sparsity) * size)))


def topk_mask(scores: np.ndarray, k: int, rank: str = "magnitude") -> np.ndarray:
    """Binary mask with ones at the ``k`` highest-ranked entries.

    Ties go to the lowest flat index.
    """
    flat = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= flat.size:
        raise ValueError(f"k={k} out of range for {flat.size} scores")
    if rank not in ("magnitude", "signed"):
        raise ValueError(f"unknown rank {rank!r}")
    key = np.abs(flat) if rank == "magnitude" else flat
    order = np.argsort(-key, kind="stable")
    mask = np.zeros(flat.size)
    mask[order[:k]] = 1.0
    return mask.reshape(np.shape(scores))


@dataclass
class PrunableLayer:
    w: np.ndarray
    bias: np.ndarray | None = None
    prunable: bool = True
    s: np.ndarray = None
    m: np.ndarray = None
    z: np.ndarray = None
    nu: np.ndarray = None
    k: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        for name in ("s", "z", "nu"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.w))
        if self.m is None:
            self.m = np.ones_like(self.w)
        if not self.k:
            self.k = self.w.size
        for name in ("s", "m", "z", "nu"):
            if getattr(self, name).shape != self.w.shape:
                raise ShapeError(f"layer buffer {name} has shape {getattr(self, name).shape}, "
                                 f"weights have {self.w.shape}")

    @property
    def size(self) -> int:
        return self.w.size


@dataclass
class Bound:
    """Graph tensors for one forward pass over a network."""
    weights: list[Tensor]
    biases: list[Tensor | None]
    w_leaves: list[Tensor]
    s_leaves: list[Tensor | None]
    b_leaves: list[Tensor | None]


@dataclass
class Network:
    layers: list[PrunableLayer]
    rank: str = "magnitude"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.w.shape[1] != b.w.shape[0]:
                raise ShapeError(f"layer dims do not conform: {a.w.shape} -> {b.w.shape}")

    @classmethod
    def mlp(cls, dims, rng: np.random.Generator, exempt_first_last: bool = False,
            rank: str = "magnitude") -> "Network":
        """He-uniform initialised MLP; biases start at zero."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            edge = i == 0 or i == len(dims) - 2
            layers.append(PrunableLayer(w=w, bias=np.zeros(fan_out),
                                        prunable=not (exempt_first_last and edge)))
        return cls(layers, rank=rank)

    @property
    def prunable(self) -> list[PrunableLayer]:
        return [l for l in self.layers if l.prunable]

    @property
    def num_prunable(self) -> int:
        return sum(l.size for l in self.prunable)

    def dims(self) -> list[int]:
        return [self.layers[0].w.shape[0]] + [l.w.shape[1] for l in self.layers]

    def set_sparsity(self, sparsity: float) -> None:
        for layer in self.prunable:
            layer.k = retained_count(layer.size, sparsity)

    def init_scores(self) -> None:
        """Scores proportional to weights, scaled so that max |s_l| == 1."""
        for i, layer in enumerate(self.prunable):
            peak = np.max(np.abs(layer.w))
            if peak == 0:
                layer.s = np.zeros_like(layer.w)
                msg = f"layer {i}: all-zero weights, scores left at zero"
                self.warnings.append(msg)
                log.warning(msg)
            else:
                layer.s = layer.w / peak

    def update_masks(self) -> None:
        for layer in self.prunable:
            layer.m = topk_mask(layer.s, layer.k, self.rank)

    def masks(self) -> list[np.ndarray]:
        return [l.m.copy() for l in self.prunable]

    def current_masks(self) -> list[np.ndarray]:
        return [topk_mask(l.s, l.k, self.rank) for l in self.prunable]

    def set_masks(self, masks) -> None:
        for layer, m in zip(self.prunable, masks):
            layer.m = np.asarray(m, dtype=np.float64).copy()

    def scores(self) -> list[np.ndarray]:
        return [l.s.copy() for l in self.prunable]

    def set_scores(self, scores) -> None:
        for layer, s in zip(self.prunable, scores):
            layer.s = np.array(s, dtype=np.float64)

    def weights(self) -> list[np.ndarray]:
        return [l.w.copy() for l in self.layers]

    def copy(self) -> "Network":
        layers = [PrunableLayer(w=l.w.copy(), bias=None if l.bias is None else l.bias.copy(),
                                prunable=l.prunable, s=l.s.copy(), m=l.m.copy(),
                                z=l.z.copy(), nu=l.nu.copy(), k=l.k) for l in self.layers]
        return Network(layers, rank=self.rank, warnings=list(self.warnings))

    # -- graph construction ------------------------------------------------

    def bind(self, graph: Graph, mode: str = "search", *, grad_scores: bool = False,
             grad_weights: bool = False, grad_biases: bool = False,
             scores: list[np.ndarray] | None = None,
             surrogate_ref: list[np.ndarray] | None = None) -> Bound:
        """Build effective weights for one forward pass.

        mode:
          ``dense``     -- raw weights, no mask.
          ``search``    -- w * M(scores, k) with a straight-through score path.
          ``mask``      -- w * m with the stored (fixed) mask.
          ``surrogate`` -- w * (M(ref, k) + scores - ref): the mask frozen at the
                           reference scores with an identity score path, used for
                           score-space curvature.
        ``scores`` overrides the stored layer scores (search/surrogate only).
        """
        if mode not in ("dense", "search", "mask", "surrogate"):
            raise ValueError(f"unknown mode {mode!r}")
        weights, biases, w_leaves, s_leaves, b_leaves = [], [], [], [], []
        j = 0
        for layer in self.layers:
            wt = Tensor(layer.w, requires_grad=grad_weights)
            w_leaves.append(wt)
            bt = None if layer.bias is None else Tensor(layer.bias, requires_grad=grad_biases)
            b_leaves.append(bt)
            biases.append(bt)
            st = None
            if mode == "dense" or not layer.prunable:
                eff = wt
            elif mode == "mask":
                eff = graph.mul(wt, Tensor(layer.m))
            else:
                s_val = layer.s if scores is None else scores[j]
                st = Tensor(s_val, requires_grad=grad_scores)
                if mode == "search":
                    gate = graph.straight_through(st, topk_mask(s_val, layer.k, self.rank))
                else:
                    ref = surrogate_ref[j]
                    gate = graph.straight_through(st, topk_mask(ref, layer.k, self.rank) + (s_val - ref))
                eff = graph.mul(wt, gate)
            if layer.prunable:
                s_leaves.append(st)
                j += 1
            weights.append(eff)
        return Bound(weights, biases, w_leaves, s_leaves, b_leaves)

    def forward(self, graph: Graph, x: Tensor, bound: Bound) -> Tensor:
        """Logits; relu between layers."""
        h = x
        n = len(self.layers)
        for i, (w, b) in enumerate(zip(bound.weights, bound.biases)):
            h = graph.matmul(h, w)
            if b is not None:
                h = graph.add(h, b)
            if i < n - 1:
                h = graph.relu(h)
        return h

    def logits(self, x: np.ndarray, mode: str = "mask") -> np.ndarray:
        """Numeric forward without gradient bookkeeping."""
        g = Graph()
        return self.forward(g, Tensor(x), self.bind(g, mode)).data

    def predict(self, x: np.ndarray, mode: str = "mask") -> np.ndarray:
        return np.argmax(self.logits(x, mode), axis=1)


def masked_forward(net: Network, graph: Graph, x, score_override=None,
                   mode: str = "search", **bind_kw) -> tuple[Tensor, Bound]:
    """Logits of ``f(x; w * M(score_override, k))`` (search) or ``f(x; w * m)`` (mask)."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    bound = net.bind(graph, mode, scores=score_override, **bind_kw)
    return net.forward(graph, xt, bound), bound


def ste_backward(graph: Graph, loss: Tensor, bound: Bound) -> list[np.ndarray]:
    """Score gradients under the straight-through estimator (dM/ds := 1)."""
    grads = graph.backward(loss)
    return [grads[s] for s in bound.s_leaves if s is not None]


# -- checkpoints -------------------------------------------------------------
#
# Layout: b"SPCHK1\n", uint64 little-endian header length, UTF-8 JSON header,
# then raw little-endian float64 arrays.  For each layer in order: w, s, m and,
# when ``has_bias``, bias.  The header lists shapes, k, prunable flags, rank
# and the producing run configuration.


def save_checkpoint(net: Network, path, config: dict | None = None) -> None:
    header = {
        "version": 1,
        "rank": net.rank,
        "config": config or {},
        "layers": [{"shape": list(l.w.shape), "k": l.k, "prunable": l.prunable,
                    "has_bias": l.bias is not None} for l in net.layers],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(raw)), raw]
    for l in net.layers:
        arrays = [l.w, l.s, l.m] + ([l.bias] if l.bias is not None else [])
        chunks.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[Network, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an SPCHK1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        return arr

    layers = []
    for meta in header["layers"]:
        shape = tuple(meta["shape"])
        w, s, m = take(shape), take(shape), take(shape)
        bias = take((shape[1],)) if meta["has_bias"] else None
        layers.append(PrunableLayer(w=w, bias=bias, prunable=meta["prunable"], s=s, m=m, k=meta["k"]))
    return Network(layers, rank=header["rank"]), header["config"]
