"""Numerical substrate: parameter storage, recurrent cells, initialisers,
distribution helpers and the ADAM optimiser.

Arrays are ``torch.Tensor`` objects. Reverse-mode differentiation is handled by
torch autograd; everything else (initialisation, optimiser state, persistence)
lives here so that the training state is fully owned by :class:`ParamStore`.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (
    IoFailure,
    ManifestChecksumMismatch,
    NonFiniteLogits,
    NonPositiveSigma,
    ShapeMismatch,
)

DTYPE = torch.float32
STORE_FORMAT = "compmeta-store"
STORE_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GUMBEL_CLAMP = 1e-12


@dataclass
class ParamStore:
    """Named parameter tensors plus ADAM moment buffers."""

    entries: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0
    w_init: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name, value in self.entries.items():
            self.adam_m.setdefault(name, torch.zeros_like(value))
            self.adam_v.setdefault(name, torch.zeros_like(value))
        if set(self.adam_m) != set(self.entries) or set(self.adam_v) != set(self.entries):
            raise ShapeMismatch("ADAM buffers must cover exactly the parameter entries")

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def parameters(self):
        return list(self.entries.values())

    def requires_grad_(self, flag=True):
        for value in self.entries.values():
            value.requires_grad_(flag)
        return self

    def zero_grad(self):
        for value in self.entries.values():
            value.grad = None

    def grads(self):
        return {n: v.grad for n, v in self.entries.items() if v.grad is not None}

    def num_parameters(self):
        return sum(v.numel() for v in self.entries.values())

    def copy(self, dtype=None):
        """Deep copy, optionally casting to ``dtype`` (used for float64 gradient checks)."""

        def cast(d):
            out = {}
            for n, v in d.items():
                t = v.detach().clone()
                out[n] = t.to(dtype) if dtype is not None else t
            return out

        store = ParamStore(cast(self.entries), cast(self.adam_m), cast(self.adam_v),
                           self.step_count, self.w_init, self.seed)
        for name, value in self.entries.items():
            store.entries[name].requires_grad_(value.requires_grad)
        return store


# ---------------------------------------------------------------------------
# recurrent cells


def _check_last(t, size, what):
    if t.shape[-1] != size:
        raise ShapeMismatch(f"{what}: expected last dimension {size}, got {tuple(t.shape)}")


def elman_step(W_ih, b_ih, W_hh, b_hh, x, h):
    """tanh(W_ih x + b_ih + W_hh h + b_hh) for row-vector batches ``x`` (..., D), ``h`` (..., H)."""
    H, D = W_ih.shape
    if W_hh.shape != (H, H) or b_ih.shape != (H,) or b_hh.shape != (H,):
        raise ShapeMismatch("inconsistent Elman parameter shapes")
    _check_last(x, D, "elman input")
    _check_last(h, H, "elman hidden")
    return torch.tanh(x @ W_ih.T + b_ih + h @ W_hh.T + b_hh)


def elman_bank_step(W_ih, b_ih, W_hh, b_hh, x, h):
    """Advance N stacked Elman cells at once.

    W_ih (N, H, D), W_hh (N, H, H), biases (N, H); ``x`` is (P, D) and shared by every
    cell, ``h`` is either (P, H) (shared start state) or (P, N, H) (one per cell).
    Returns (P, N, H).
    """
    N, H, D = W_ih.shape
    if W_hh.shape != (N, H, H) or b_ih.shape != (N, H) or b_hh.shape != (N, H):
        raise ShapeMismatch("inconsistent Elman bank parameter shapes")
    _check_last(x, D, "bank input")
    _check_last(h, H, "bank hidden")
    P = x.shape[0]
    pre = (x @ W_ih.reshape(N * H, D).T).view(P, N, H) + b_ih + b_hh
    if h.dim() == 2:
        pre = pre + (h @ W_hh.reshape(N * H, H).T).view(P, N, H)
    else:
        if h.shape[1] != N:
            raise ShapeMismatch("per-cell hidden state must have one row per cell")
        pre = pre + torch.einsum("pnk,nhk->pnh", h, W_hh)
    return torch.tanh(pre)


def gru_step(params, x, h):
    """Standard GRU update with PyTorch's gate layout (reset, update, candidate).

    ``params`` maps ``W_ih`` (3H, D), ``W_hh`` (3H, H), ``b_ih`` and ``b_hh`` (3H,).
    """
    W_ih, W_hh, b_ih, b_hh = params["W_ih"], params["W_hh"], params["b_ih"], params["b_hh"]
    H3, D = W_ih.shape
    H = H3 // 3
    if H3 != 3 * H or W_hh.shape != (H3, H) or b_ih.shape != (H3,) or b_hh.shape != (H3,):
        raise ShapeMismatch("inconsistent GRU parameter shapes")
    _check_last(x, D, "gru input")
    _check_last(h, H, "gru hidden")
    gi = x @ W_ih.T + b_ih
    gh = h @ W_hh.T + b_hh
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


# ---------------------------------------------------------------------------
# initialisation


@dataclass(frozen=True)
class LayerSpec:
    """One parameter entry to create.

    kind is one of ``linear`` / ``input`` (Xavier uniform), ``recurrent`` (orthogonal),
    ``bias`` / ``hidden0`` (zeros) or ``const`` (filled with ``value``).
    ``stack`` > 0 creates that many independent copies along a leading axis,
    ``blocks`` > 1 initialises a recurrent matrix as stacked square blocks (GRU gates).
    """

    name: str
    kind: str
    shape: tuple
    stack: int = 0
    blocks: int = 1
    value: float = 0.0


def xavier_uniform(rng, fan_out, fan_in, gain):
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def orthogonal(rng, n, gain):
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return gain * q


def _init_one(spec, w_init, rng):
    if spec.kind in ("linear", "input"):
        out, inp = spec.shape
        return xavier_uniform(rng, out, inp, w_init)
    if spec.kind == "recurrent":
        rows, cols = spec.shape
        if rows != spec.blocks * cols:
            raise ShapeMismatch(f"{spec.name}: recurrent blocks must be square")
        return np.concatenate([orthogonal(rng, cols, w_init) for _ in range(spec.blocks)], axis=0)
    if spec.kind in ("bias", "hidden0"):
        return np.zeros(spec.shape)
    if spec.kind == "const":
        return np.full(spec.shape, spec.value)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def init_params(specs, w_init, rng, seed=0):
    """Create a :class:`ParamStore` from a list of :class:`LayerSpec`.

    ``rng`` is a ``numpy.random.Generator``; entries are drawn in list order so equal
    streams give bit-identical stores.
    """
    if w_init <= 0:
        raise ValueError("w_init must be positive")
    entries = {}
    for spec in specs:
        if spec.stack:
            value = np.stack([_init_one(spec, w_init, rng) for _ in range(spec.stack)])
        else:
            value = _init_one(spec, w_init, rng)
        entries[spec.name] = torch.as_tensor(np.asarray(value), dtype=DTYPE).clone()
    return ParamStore(entries, w_init=w_init, seed=seed)


# ---------------------------------------------------------------------------
# distributions


def gumbel_noise(u):
    # float64 so that the upper clamp is representable.
    u = u.double().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -torch.log(-torch.log(u))


def gumbel_softmax(logits, temperature=1.0, rng=None, hard=False, u=None):
    """Relaxed (``hard=False``) or exact one-hot (``hard=True``) categorical sample.

    ``u`` are uniforms of the same shape as ``logits``; when omitted they are drawn
    from the numpy generator ``rng``. Soft samples are differentiable w.r.t. logits.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if torch.isnan(logits).any() or torch.isposinf(logits).any():
        raise NonFiniteLogits("logits contain NaN or +inf")
    if u is None:
        if rng is None:
            raise ValueError("either rng or u must be given")
        u = torch.as_tensor(rng.random(tuple(logits.shape)))
    perturbed = logits + gumbel_noise(u).to(logits.dtype)
    if hard:
        index = perturbed.argmax(dim=-1)
        return torch.nn.functional.one_hot(index, logits.shape[-1]).to(logits.dtype)
    return torch.softmax(perturbed / temperature, dim=-1)


LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def mvn_logpdf(y, mu, sigma):
    """Isotropic normal log-density with standard deviation ``sigma``, summed over the last axis."""
    if torch.is_tensor(sigma):
        if (sigma <= 0).any():
            raise NonPositiveSigma("sigma must be positive")
    elif sigma <= 0:
        raise NonPositiveSigma("sigma must be positive")
    if y.shape[-1] != mu.shape[-1]:
        raise ShapeMismatch("y and mu must have the same length")
    d = y.shape[-1]
    sigma = torch.as_tensor(sigma, dtype=mu.dtype)
    sq = ((y - mu) ** 2).sum(dim=-1)
    return -d * (torch.log(sigma) + LOG_SQRT_2PI) - sq / (2.0 * sigma**2)


def softplus_inverse(x):
    return math.log(math.expm1(x))


# ---------------------------------------------------------------------------
# optimisation


@torch.no_grad()
def adam_step(store, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected ADAM update of the entries named in ``grads`` (in place)."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = store.entries[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return store


def global_norm(grads):
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_global_norm(grads, max_norm):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}


# ---------------------------------------------------------------------------
# persistence


def _blob_path(manifest_path):
    return Path(manifest_path).with_suffix(".bin")


def save_store(store, path, meta=None, include_optimizer=False):
    """Write ``path`` (JSON manifest) and a sidecar ``.bin`` blob of little-endian float32."""
    path = Path(path)
    groups = [("", store.entries)]
    if include_optimizer:
        groups += [("adam_m/", store.adam_m), ("adam_v/", store.adam_v)]
    chunks, records, offset = [], [], 0
    for prefix, tensors in groups:
        for name in sorted(tensors):
            arr = tensors[name].detach().to(torch.float32).contiguous().numpy().astype("<f4")
            raw = arr.tobytes()
            records.append({"name": prefix + name, "shape": list(arr.shape),
                            "offset": offset, "count": int(arr.size)})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "blob": _blob_path(path).name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "entries": records,
        "w_init": store.w_init,
        "seed": store.seed,
        "step_count": store.step_count,
        "meta": meta or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _blob_path(path).write_bytes(blob)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_store(path):
    """Inverse of :func:`save_store`; returns ``(store, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        blob = (path.parent / manifest["blob"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read parameter store {path}: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT:
        raise IoFailure(f"{path} is not a parameter store manifest")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ManifestChecksumMismatch(f"blob checksum mismatch for {path}")
    entries, adam_m, adam_v = {}, {}, {}
    for rec in manifest["entries"]:
        raw = blob[rec["offset"]: rec["offset"] + 4 * rec["count"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
        tensor = torch.from_numpy(arr)
        name = rec["name"]
        if name.startswith("adam_m/"):
            adam_m[name[7:]] = tensor
        elif name.startswith("adam_v/"):
            adam_v[name[7:]] = tensor
        else:
            entries[name] = tensor
    store = ParamStore(entries, adam_m, adam_v, manifest["step_count"], manifest["w_init"], manifest["seed"])
    return store, manifest
