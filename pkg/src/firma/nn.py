"""MLP extractor + linear head in plain numpy (float64).

Extractor: FC(d->256) -> LN -> ReLU -> FC(256->256) -> LN -> ReLU -> FC(256->e) -> ReLU.
Head: FC(e->C).

Parameters of each block live in one flat vector so that gossip, averaging
and the optimizers work on contiguous arrays; named views expose the
individual weight matrices.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from firma.data import LabeledDataset
from firma.errors import ShapeError, UndefinedMetricError

HIDDEN = 256
EMBED = 128
LN_EPS = 1e-5

PHASE_HEAD, PHASE_EXTRACTOR, PHASE_FULL = 0, 1, 2


@dataclass(frozen=True)
class Layout:
    entries: tuple  # ((name, shape), ...)

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.entries)

    def views(self, flat: np.ndarray) -> dict:
        out, off = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = flat[off: off + n].reshape(shape)
            off += n
        return out


def extractor_layout(d: int, hidden: int = HIDDEN, embed: int = EMBED) -> Layout:
    return Layout((
        ("W1", (d, hidden)), ("b1", (hidden,)), ("g1", (hidden,)), ("s1", (hidden,)),
        ("W2", (hidden, hidden)), ("b2", (hidden,)), ("g2", (hidden,)), ("s2", (hidden,)),
        ("W3", (hidden, embed)), ("b3", (embed,)),
    ))


def head_layout(embed: int, n_classes: int) -> Layout:
    return Layout((("W", (embed, n_classes)), ("b", (n_classes,))))


@dataclass(eq=False)
class ParamBlock:
    layout: Layout
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ShapeError(f"expected {self.layout.size} parameters, got {self.flat.shape}")
        self._views = self.layout.views(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __len__(self) -> int:
        return self.layout.size

    def copy(self):
        return type(self)(self.layout, self.flat.copy())

    # the cached views must point into the new flat buffer, not a copy of the old one
    def __deepcopy__(self, memo):
        return self.copy()

    def __reduce__(self):
        return type(self), (self.layout, self.flat)


class ExtractorParams(ParamBlock):
    pass


class HeadParams(ParamBlock):
    pass


def param_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def init_model(d: int, seed: int, n_classes: int = 10, hidden: int = HIDDEN,
               embed: int = EMBED) -> tuple[ExtractorParams, HeadParams]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; LN gain 1, shift 0."""
    if d < 1:
        raise ValueError("input dimension must be >= 1")
    rng = np.random.default_rng(seed)
    ext_layout, head_lay = extractor_layout(d, hidden, embed), head_layout(embed, n_classes)
    ext = ExtractorParams(ext_layout, np.zeros(ext_layout.size))
    head = HeadParams(head_lay, np.zeros(head_lay.size))
    for block, pairs in ((ext, (("W1", "b1"), ("W2", "b2"), ("W3", "b3"))), (head, (("W", "b"),))):
        for w, b in pairs:
            bound = np.sqrt(1.0 / block[w].shape[0])
            block[w][...] = rng.uniform(-bound, bound, size=block[w].shape)
            block[b][...] = rng.uniform(-bound, bound, size=block[b].shape)
    ext["g1"][...] = 1.0
    ext["g2"][...] = 1.0
    return ext, head


# ------------------------------------------------------------ forward/back


def _layernorm(z):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (z - mu) * inv, inv


def _layernorm_backward(dn, n, inv):
    return inv * (dn - dn.mean(axis=1, keepdims=True) - n * (dn * n).mean(axis=1, keepdims=True))


def embed(ext: ExtractorParams, x: np.ndarray):
    """Extractor forward pass; returns the embedding and the backward cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ext["W1"].shape[0]:
        raise ShapeError(f"batch width {x.shape[-1]} != input dim {ext['W1'].shape[0]}")
    z1 = x @ ext["W1"] + ext["b1"]
    n1, inv1 = _layernorm(z1)
    y1 = ext["g1"] * n1 + ext["s1"]
    h1 = np.maximum(y1, 0.0)
    z2 = h1 @ ext["W2"] + ext["b2"]
    n2, inv2 = _layernorm(z2)
    y2 = ext["g2"] * n2 + ext["s2"]
    h2 = np.maximum(y2, 0.0)
    z3 = h2 @ ext["W3"] + ext["b3"]
    e = np.maximum(z3, 0.0)
    cache = dict(x=x, n1=n1, inv1=inv1, y1=y1, h1=h1, n2=n2, inv2=inv2, y2=y2, h2=h2, z3=z3, e=e)
    return e, cache


def forward(ext: ExtractorParams, head: HeadParams, x: np.ndarray):
    e, cache = embed(ext, x)
    return e @ head["W"] + head["b"], cache


def _softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_grads(ext: ExtractorParams, head: HeadParams, x, labels, which: str = "both"):
    """Mean cross-entropy and exact gradients.

    ``which`` is ``"head"``, ``"extractor"`` or ``"both"``; the gradient of a
    frozen group is returned as ``None``. Returns ``(loss, g_extractor, g_head)``
    with gradients laid out like the corresponding flat parameter vectors.
    """
    if which not in ("head", "extractor", "both"):
        raise ValueError(f"unknown parameter group {which!r}")
    labels = np.asarray(labels, dtype=np.int64)
    logits, c = forward(ext, head, x)
    loss, dlogits = _softmax_xent(logits, labels)

    g_head = None
    if which in ("head", "both"):
        g_head = np.empty(head.layout.size)
        gv = head.layout.views(g_head)
        gv["W"][...] = c["e"].T @ dlogits
        gv["b"][...] = dlogits.sum(axis=0)
    if which == "head":
        return loss, None, g_head

    g_ext = np.empty(ext.layout.size)
    gv = ext.layout.views(g_ext)
    dz3 = (dlogits @ head["W"].T) * (c["z3"] > 0)
    gv["W3"][...] = c["h2"].T @ dz3
    gv["b3"][...] = dz3.sum(axis=0)
    dy2 = (dz3 @ ext["W3"].T) * (c["y2"] > 0)
    gv["g2"][...] = (dy2 * c["n2"]).sum(axis=0)
    gv["s2"][...] = dy2.sum(axis=0)
    dz2 = _layernorm_backward(dy2 * ext["g2"], c["n2"], c["inv2"])
    gv["W2"][...] = c["h1"].T @ dz2
    gv["b2"][...] = dz2.sum(axis=0)
    dy1 = (dz2 @ ext["W2"].T) * (c["y1"] > 0)
    gv["g1"][...] = (dy1 * c["n1"]).sum(axis=0)
    gv["s1"][...] = dy1.sum(axis=0)
    dz1 = _layernorm_backward(dy1 * ext["g1"], c["n1"], c["inv1"])
    gv["W1"][...] = c["x"].T @ dz1
    gv["b1"][...] = dz1.sum(axis=0)
    return loss, g_ext, g_head


# -------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.scratch is None or self.scratch.shape != self.m.shape:
            self.scratch = np.empty_like(self.m)

    @classmethod
    def zeros(cls, size: int, lr: float = 0.01, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params, grads and Adam moments must share a shape")
    buf = state.scratch
    state.t += 1
    state.m *= state.beta1
    np.multiply(grads, 1.0 - state.beta1, out=buf)
    state.m += buf
    state.v *= state.beta2
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - state.beta2
    state.v += buf
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    # lr * m_hat / (sqrt(v_hat) + eps)
    np.sqrt(state.v, out=buf)
    buf /= np.sqrt(bc2)
    buf += state.eps
    np.divide(state.m, buf, out=buf)
    buf *= state.lr / bc1
    params -= buf
    return params


def sgd_momentum_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
                      lr: float = 0.01, momentum: float = 0.9) -> np.ndarray:
    """Heavy-ball SGD (``v <- mu*v + g; p <- p - lr*v``), in place."""
    velocity *= momentum
    velocity += grads
    params -= lr * velocity
    return params


# ------------------------------------------------------------------ client


@dataclass(eq=False)
class ClientState:
    client_id: int
    extractor: ExtractorParams
    head: HeadParams
    data: LabeledDataset
    adam_head: AdamState
    adam_extractor: AdamState
    vel_head: np.ndarray = field(repr=False, default=None)
    vel_extractor: np.ndarray = field(repr=False, default=None)
    last_train_accuracy: float = 0.0

    def __post_init__(self):
        if self.vel_head is None:
            self.vel_head = np.zeros(len(self.head))
        if self.vel_extractor is None:
            self.vel_extractor = np.zeros(len(self.extractor))

    @classmethod
    def create(cls, client_id: int, extractor: ExtractorParams, head: HeadParams,
               data: LabeledDataset, lr: float = 0.01) -> "ClientState":
        return cls(client_id, extractor.copy(), head.copy(), data,
                   AdamState.zeros(len(head), lr), AdamState.zeros(len(extractor), lr))

    @property
    def n_samples(self) -> int:
        return len(self.data)

    def reset_velocity(self):
        self.vel_head[...] = 0.0
        self.vel_extractor[...] = 0.0


def flatten_extractor(ext: ExtractorParams) -> np.ndarray:
    return ext.flat.copy()


def set_extractor(client: ClientState, vector: np.ndarray) -> None:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != client.extractor.flat.shape:
        raise ShapeError(f"extractor vector has shape {vector.shape}, expected {client.extractor.flat.shape}")
    client.extractor.flat[...] = vector


def batch_rng(seed: int, client_id: int, round_idx: int, phase: int, epoch: int):
    """Counter-style stream for one (client, round, phase, epoch) shuffle."""
    return np.random.default_rng([seed, client_id, round_idx, phase, epoch])


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _epochs(client: ClientState, epochs: int, batch_size: int, phase: int, seed: int,
            round_idx: int, step: Callable[[np.ndarray, np.ndarray], None]):
    n = client.n_samples
    for epoch in range(epochs):
        order = batch_rng(seed, client.client_id, round_idx, phase, epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            step(client.data.features[idx], client.data.labels[idx])


def predict(ext: ExtractorParams, head: HeadParams, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(ext, head, x)
    return np.argmax(logits, axis=1)  # ties -> lowest class index


def evaluate(client, dataset: LabeledDataset) -> float:
    """Top-1 accuracy of ``client`` (a ClientState or an (extractor, head) pair)."""
    if len(dataset) == 0:
        raise UndefinedMetricError("accuracy of an empty subset is undefined")
    ext, head = (client.extractor, client.head) if isinstance(client, ClientState) else client
    return float(np.mean(predict(ext, head, dataset.features) == dataset.labels))


def train_accuracy(client: ClientState) -> float:
    return evaluate(client, client.data) if client.n_samples else 0.0


def local_train_two_phase(client: ClientState, E_h: int, E_e: int, batch_size: int,
                          seed: int = 0, round_idx: int = 0, optimizer: str = "adam",
                          lr: float = 0.01, momentum: float = 0.9) -> ClientState:
    """Phase 1 trains the head with the extractor frozen, Phase 2 the reverse.

    With ``optimizer="adam"`` the client's persistent Adam states are used
    (their ``lr`` applies); ``"sgd"`` uses the momentum buffers. Records the
    post-training accuracy on the local shard in ``last_train_accuracy``.
    """
    if client.n_samples == 0:
        client.last_train_accuracy = 0.0
        return client

    def head_step(x, y):
        _, _, g = loss_and_grads(client.extractor, client.head, x, y, "head")
        if optimizer == "adam":
            adam_step(client.head.flat, g, client.adam_head)
        else:
            sgd_momentum_step(client.head.flat, g, client.vel_head, lr, momentum)

    def ext_step(x, y):
        _, g, _ = loss_and_grads(client.extractor, client.head, x, y, "extractor")
        if optimizer == "adam":
            adam_step(client.extractor.flat, g, client.adam_extractor)
        else:
            sgd_momentum_step(client.extractor.flat, g, client.vel_extractor, lr, momentum)

    _epochs(client, E_h, batch_size, PHASE_HEAD, seed, round_idx, head_step)
    _epochs(client, E_e, batch_size, PHASE_EXTRACTOR, seed, round_idx, ext_step)
    client.last_train_accuracy = train_accuracy(client)
    return client


def local_train_full(client: ClientState, epochs: int, batch_size: int, seed: int = 0,
                     round_idx: int = 0, optimizer: str = "sgd", lr: float = 0.01,
                     momentum: float = 0.9) -> ClientState:
    """Joint extractor+head training (baselines and FibFL++ warmup)."""
    if client.n_samples == 0:
        client.last_train_accuracy = 0.0
        return client

    def step(x, y):
        _, ge, gh = loss_and_grads(client.extractor, client.head, x, y, "both")
        if optimizer == "adam":
            adam_step(client.extractor.flat, ge, client.adam_extractor)
            adam_step(client.head.flat, gh, client.adam_head)
        else:
            sgd_momentum_step(client.extractor.flat, ge, client.vel_extractor, lr, momentum)
            sgd_momentum_step(client.head.flat, gh, client.vel_head, lr, momentum)

    _epochs(client, epochs, batch_size, PHASE_FULL, seed, round_idx, step)
    client.last_train_accuracy = train_accuracy(client)
    return client


def save_checkpoint(path, ext: ExtractorParams, head: HeadParams) -> None:
    """Little-endian float64 blob plus a JSON sidecar describing the layout."""
    import json
    from pathlib import Path

    path = Path(path)
    blob = np.concatenate([ext.flat, head.flat]).astype("<f8")
    path.write_bytes(blob.tobytes())
    meta = {
        "dtype": "<f8",
        "blocks": [
            {"name": "extractor", "entries": [[n, list(s)] for n, s in ext.layout.entries]},
            {"name": "head", "entries": [[n, list(s)] for n, s in head.layout.entries]},
        ],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> tuple[ExtractorParams, HeadParams]:
    import json
    from pathlib import Path

    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    blocks, off = [], 0
    for spec, cls in zip(meta["blocks"], (ExtractorParams, HeadParams)):
        layout = Layout(tuple((n, tuple(s)) for n, s in spec["entries"]))
        blocks.append(cls(layout, flat[off: off + layout.size].copy()))
        off += layout.size
    if off != flat.size:
        raise ShapeError(f"checkpoint holds {flat.size} values, layout needs {off}")
    return blocks[0], blocks[1]
