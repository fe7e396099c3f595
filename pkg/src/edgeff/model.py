"""Edge-token attention force field.

A molecular system becomes an N x N x D tensor of pair tokens (diagonal
entries stand for the atoms themselves). Stacked pre-LN layers update the
tokens with attention over atom triples, and a direct head reads out one
force vector per atom. Inputs are pairwise distances and absolute pair
angles only, so translation invariance is exact while rotation behaviour
is learned, not built in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore

SQRT_2PI = math.sqrt(2.0 * math.pi)
MASK_NEG = -1.0e30  # underflows to exactly zero weight after softmax, stays finite


class VocabularyError(ValueError):
    """Atomic number, spin, or charge outside the embedding vocabulary."""


class FiniteValueError(FloatingPointError):
    """Non-finite value where the contract requires finite output."""


@dataclass
class ModelConfig:
    embed_dim: int = 32
    n_layers: int = 3
    n_heads: int = 4
    ffn_multiplier: int = 4
    n_rbf: int = 16
    n_fourier: int = 16
    atom_vocab: int = 12
    spin_vocab: int = 4
    charge_vocab: int = 5
    layer_norm_affine: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.n_rbf < 1 or self.n_fourier < 1:
            raise ValueError("n_rbf and n_fourier must be >= 1")
        if self.n_fourier % 2 != 0:
            raise ValueError("n_fourier must be even (sin/cos pairs per angle)")
        for name in ("atom_vocab", "spin_vocab", "charge_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, kv: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name]
                kwargs[f.name] = (
                    _parse_bool(raw) if f.type == "bool" else int(raw)
                )
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    if str(raw).lower() in ("1", "true", "yes", "on"):
        return True
    if str(raw).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


PAPER_PRESET = dict(
    embed_dim=192,
    n_layers=12,
    n_heads=12,
    ffn_multiplier=4,
    n_rbf=128,
    n_fourier=128,
    atom_vocab=87,
    spin_vocab=9,
    charge_vocab=13,
)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> ParameterStore:
    """Fan-in scaled uniform linear maps, N(0, 1/sqrt(D)) embedding tables.

    Draws always happen at 64-bit in a fixed order, then cast, so a seed pins
    the checkpoint bytes regardless of run precision.
    """
    dtype = dtype or ad.default_dtype()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    D = cfg.embed_dim

    def table(path, rows):
        store.add(path, (rng.normal(size=(rows, D)) / math.sqrt(D)).astype(dtype))

    def linear(path, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(path + "/w", rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        store.add(path + "/b", rng.uniform(-bound, bound, fan_out).astype(dtype))

    def mlp(path, fan_in, fan_out):
        linear(path + "/0", fan_in, D)
        linear(path + "/1", D, fan_out)

    table("embed/atom_table", cfg.atom_vocab)
    table("embed/spin_table", cfg.spin_vocab)
    table("embed/charge_table", cfg.charge_vocab)
    mlp("embed/edge_mlp", 2 * D, D)
    store.add("embed/rbf/mu", rng.uniform(0.0, 7.0, cfg.n_rbf).astype(dtype))
    store.add("embed/rbf/sigma", rng.uniform(0.0, 3.0, cfg.n_rbf).astype(dtype))
    store.add("embed/rbf/scale", np.asarray(1.0, dtype=dtype))
    store.add("embed/rbf/shift", np.asarray(0.0, dtype=dtype))
    mlp("embed/dist_mlp", 1, D)
    linear("embed/dir", 2 * cfg.n_fourier, D)
    for i in range(cfg.n_layers):
        p = f"layers/{i}"
        store.add(p + "/ln1/gamma", np.ones(D, dtype=dtype))
        store.add(p + "/ln1/beta", np.zeros(D, dtype=dtype))
        linear(p + "/attn/in", D, 4 * D)
        linear(p + "/attn/out", D, D)
        store.add(p + "/ln2/gamma", np.ones(D, dtype=dtype))
        store.add(p + "/ln2/beta", np.zeros(D, dtype=dtype))
        linear(p + "/ffn/0", D, D * cfg.ffn_multiplier)
        linear(p + "/ffn/1", D * cfg.ffn_multiplier, D)
    mlp("head/psi1", D, D)
    mlp("head/psi2", D, D)
    mlp("head/psi3", D, 3)
    return store


# ---------------------------------------------------------------------------
# shared building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, lead + (w.shape[1],))


def _gelu(x: Tensor) -> Tensor:
    return ad.mul(ad.mul(x, 0.5), ad.add(ad.erf(ad.mul(x, 1.0 / math.sqrt(2.0))), 1.0))


def _mlp2(x: Tensor, params: ParameterStore, path: str) -> Tensor:
    h = _gelu(_linear(x, params[path + "/0/w"], params[path + "/0/b"]))
    return _linear(h, params[path + "/1/w"], params[path + "/1/b"])


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-8,
) -> Tensor:
    m = ad.mean(x, axis=-1, keepdims=True)
    c = ad.sub(x, m)
    v = ad.mean(ad.mul(c, c), axis=-1, keepdims=True)
    y = ad.div(c, ad.sqrt(ad.add(v, eps)))
    if gamma is not None:
        y = ad.add(ad.mul(y, gamma), beta)
    return y


# ---------------------------------------------------------------------------
# encoding molecular systems


class EncodedBatch:
    """Padded arrays plus masks for a batch of systems (N may vary)."""

    def __init__(self, systems, cfg: ModelConfig, dtype):
        self.systems = list(systems)
        self.cfg = cfg
        self.dtype = dtype
        self.sizes = np.array([len(s.atomic_numbers) for s in self.systems])
        n = int(self.sizes.max())
        b = len(self.systems)
        self.numbers = np.zeros((b, n), dtype=np.int64)
        self.spins = np.zeros(b, dtype=np.int64)
        self.charges = np.zeros(b, dtype=np.int64)
        self.positions = np.zeros((b, n, 3), dtype=dtype)
        self.atom_mask = np.zeros((b, n), dtype=dtype)
        qoff = cfg.charge_vocab // 2
        for i, s in enumerate(self.systems):
            ni = len(s.atomic_numbers)
            for z in s.atomic_numbers:
                if not 1 <= z < cfg.atom_vocab:
                    raise VocabularyError(
                        f"atomic number {z} outside vocabulary [1, {cfg.atom_vocab})"
                    )
            if not 0 <= s.spin < cfg.spin_vocab:
                raise VocabularyError(
                    f"spin {s.spin} outside vocabulary [0, {cfg.spin_vocab})"
                )
            if not -qoff <= s.charge < cfg.charge_vocab - qoff:
                raise VocabularyError(
                    f"charge {s.charge} outside vocabulary "
                    f"[{-qoff}, {cfg.charge_vocab - qoff})"
                )
            self.numbers[i, :ni] = s.atomic_numbers
            self.spins[i] = s.spin
            self.charges[i] = s.charge + qoff
            self.positions[i, :ni] = s.positions
            self.atom_mask[i, :ni] = 1.0

    @property
    def max_atoms(self) -> int:
        return self.positions.shape[1]

    def pair_mask(self) -> np.ndarray:
        return self.atom_mask[:, :, None] * self.atom_mask[:, None, :]


# ---------------------------------------------------------------------------
# embeddings


def _geometry(pos: Tensor, pair_guard: np.ndarray, pair_keep: np.ndarray):
    """Distances and azimuth/polar angles of pairwise displacements.

    ``pair_guard`` is 1 on entries whose geometry is undefined or masked
    (diagonal, padding) and 0 elsewhere; ``pair_keep`` is its complement.
    The guard keeps sqrt/atan2 smooth where the displacement vanishes, and
    the keep-mask zeroes those entries so the convention d=0, phi=theta=0
    holds on self-loops.
    """
    b, n = pos.shape[0], pos.shape[1]
    ri = ad.reshape(pos, (b, n, 1, 3))
    rj = ad.reshape(pos, (b, 1, n, 3))
    delta = ad.sub(ri, rj)
    guard = ad.constant(pair_guard.astype(pos.dtype))
    keep = ad.constant(pair_keep.astype(pos.dtype))
    sumsq = ad.reduce_sum(ad.mul(delta, delta), axis=-1)
    dist = ad.mul(ad.sqrt(ad.add(sumsq, guard)), keep)
    dx = ad.reshape(ad.narrow(delta, 3, 0, 1), (b, n, n))
    dy = ad.reshape(ad.narrow(delta, 3, 1, 1), (b, n, n))
    dz = ad.reshape(ad.narrow(delta, 3, 2, 1), (b, n, n))
    rho = ad.mul(ad.sqrt(ad.add(ad.add(ad.mul(dx, dx), ad.mul(dy, dy)), guard)), keep)
    phi = ad.atan2(dy, ad.add(dx, guard))
    theta = ad.atan2(rho, ad.add(dz, guard))
    return dist, phi, theta


def _fourier_frequencies(n_fourier: int, dtype):
    half = n_fourier // 2
    denom = max(1, half - 1)
    k = np.arange(half, dtype=np.float64)
    omega_phi = np.pi * (1.0 / (2.0 * np.pi)) ** (k / denom)
    omega_theta = np.pi * (1.0 / np.pi) ** (k / denom)
    return omega_phi.astype(dtype), omega_theta.astype(dtype)


def embed_batch(batch: EncodedBatch, params: ParameterStore, positions: Tensor) -> Tensor:
    """Initial pair-token tensor: atom-pair, distance, and direction channels summed."""
    cfg = batch.cfg
    b, n = positions.shape[0], positions.shape[1]
    eye = np.eye(n)[None]
    keep = batch.pair_mask() * (1.0 - eye)
    guard = 1.0 - keep
    dist, phi, theta = _geometry(positions, guard, keep)

    # atom-pair channel (spin/charge folded into each atom embedding)
    ae = ad.take_rows(params["embed/atom_table"], batch.numbers)
    se = ad.take_rows(params["embed/spin_table"], batch.spins)
    qe = ad.take_rows(params["embed/charge_table"], batch.charges)
    anode = ad.add(ae, ad.reshape(ad.add(se, qe), (b, 1, cfg.embed_dim)))
    ai = ad.broadcast_to(ad.reshape(anode, (b, n, 1, cfg.embed_dim)), (b, n, n, cfg.embed_dim))
    aj = ad.broadcast_to(ad.reshape(anode, (b, 1, n, cfg.embed_dim)), (b, n, n, cfg.embed_dim))
    pair = _mlp2(ad.concat([ai, aj], 3), params, "embed/edge_mlp")

    # distance channel: sum of K Gaussian kernels of the scaled distance
    x = ad.add(ad.mul(dist, params["embed/rbf/scale"]), params["embed/rbf/shift"])
    t = ad.sub(ad.reshape(x, (b, n, n, 1)), params["embed/rbf/mu"])
    sigma = params["embed/rbf/sigma"]
    s2 = ad.mul(sigma, sigma)
    kernels = ad.mul(
        ad.div(1.0 / SQRT_2PI, sigma),
        ad.exp(ad.neg(ad.div(ad.mul(t, t), ad.mul(s2, 2.0)))),
    )
    summed = ad.reduce_sum(kernels, axis=-1, keepdims=True)
    radial = _mlp2(summed, params, "embed/dist_mlp")

    # direction channel: Fourier features of the two angles, one linear map
    omega_phi, omega_theta = _fourier_frequencies(cfg.n_fourier, positions.dtype)
    ap = ad.mul(ad.reshape(phi, (b, n, n, 1)), ad.constant(omega_phi))
    at = ad.mul(ad.reshape(theta, (b, n, n, 1)), ad.constant(omega_theta))
    feats = ad.concat([ad.sin(ap), ad.cos(ap), ad.sin(at), ad.cos(at)], 3)
    direction = _linear(feats, params["embed/dir/w"], params["embed/dir/b"])

    tokens = ad.add(ad.add(pair, radial), direction)
    full_mask = batch.pair_mask()[..., None].astype(batch.dtype)
    if not np.all(full_mask == 1.0):
        tokens = ad.mul(tokens, ad.constant(full_mask))
    return tokens


def embed_system(system, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Pair-token embedding of one system, shape [N, N, D]."""
    batch = EncodedBatch([system], cfg, ad.default_dtype())
    pos = ad.tensor(batch.positions)
    out = embed_batch(batch, params, pos)
    n = batch.max_atoms
    return ad.reshape(out, (n, n, cfg.embed_dim))


def rbf_kernel(x, mu, sigma):
    """Single normalized Gaussian kernel value, plain numpy."""
    return np.exp(-((x - mu) ** 2) / (2.0 * sigma**2)) / (SQRT_2PI * sigma)


# ---------------------------------------------------------------------------
# attention over atom triples


def triangle_attention(
    x: Tensor,
    params: ParameterStore,
    path: str,
    n_heads: int,
    lmask_add: np.ndarray | None = None,
    layer_index: int = 0,
    chunk_elems: int = 1 << 22,
) -> Tensor:
    """Pair-token attention: token (i,j) attends over bridging atoms l.

    Token (i,j) aggregates value vectors V1(i,l) * V2(l,j) with weights
    softmax_l of <Q(i,l), K(l,j)> / sqrt(d_head). Heads partition channels;
    the contraction runs as reshaped batched matmuls, chunked over i to
    bound the N^3 intermediates.
    """
    b, n = x.shape[0], x.shape[1]
    d = x.shape[3]
    h = n_heads
    dh = d // h
    qkv = _linear(x, params[path + "/in/w"], params[path + "/in/b"])
    q = ad.reshape(ad.narrow(qkv, 3, 0, d), (b, n, n, h, dh))
    k = ad.reshape(ad.narrow(qkv, 3, d, d), (b, n, n, h, dh))
    v1 = ad.reshape(ad.narrow(qkv, 3, 2 * d, d), (b, n, n, h, dh))
    v2 = ad.reshape(ad.narrow(qkv, 3, 3 * d, d), (b, n, n, h, dh))

    qp = ad.reshape(ad.transpose(q, (0, 3, 2, 1, 4)), (b * h * n, n, dh))  # [l,i,:]
    kp = ad.reshape(ad.transpose(k, (0, 3, 1, 2, 4)), (b * h * n, n, dh))  # [l,j,:]
    logits = ad.bmm(qp, ad.transpose(kp, (0, 2, 1)))
    logits = ad.transpose(ad.reshape(logits, (b, h, n, n, n)), (0, 1, 3, 4, 2))
    logits = ad.mul(logits, 1.0 / math.sqrt(dh))  # [b, h, i, j, l]
    if np.isnan(logits.data).any():
        raise FiniteValueError(f"NaN attention logits in layer {layer_index}")
    if lmask_add is not None:
        logits = ad.add(logits, ad.constant(lmask_add.astype(x.dtype)))
    alpha = ad.softmax_lastaxis(logits)

    v1p = ad.transpose(v1, (0, 3, 1, 2, 4))  # [b, h, i, l, dh]
    v2p = ad.transpose(v2, (0, 3, 2, 1, 4))  # [b, h, j, l, dh]
    v2x = ad.reshape(v2p, (b, h, 1, n, n, dh))
    csize = max(1, min(n, chunk_elems // max(1, b * h * n * n * dh)))
    outs = []
    for i0 in range(0, n, csize):
        c = min(csize, n - i0)
        a6 = ad.reshape(ad.narrow(alpha, 2, i0, c), (b, h, c, n, n, 1))
        v16 = ad.reshape(ad.narrow(v1p, 2, i0, c), (b, h, c, 1, n, dh))
        outs.append(ad.reduce_sum(ad.mul(ad.mul(a6, v16), v2x), axis=4))
    agg = outs[0] if len(outs) == 1 else ad.concat(outs, 2)
    agg = ad.reshape(ad.transpose(agg, (0, 2, 3, 1, 4)), (b, n, n, d))
    return _linear(agg, params[path + "/out/w"], params[path + "/out/b"])


def transformer_layer(
    x: Tensor,
    params: ParameterStore,
    index: int,
    cfg: ModelConfig,
    pair_mask: np.ndarray | None = None,
    lmask_add: np.ndarray | None = None,
) -> Tensor:
    """Pre-LN block: x + attention(LN(x)), then + FFN(LN(.)), padded tokens re-zeroed."""
    p = f"layers/{index}"
    affine = cfg.layer_norm_affine

    def ln(t, which):
        if affine:
            return layer_norm(t, params[f"{p}/{which}/gamma"], params[f"{p}/{which}/beta"])
        return layer_norm(t)

    att = triangle_attention(
        ln(x, "ln1"), params, p + "/attn", cfg.n_heads, lmask_add, index
    )
    hmid = ad.add(x, att)
    ff = _mlp2(ln(hmid, "ln2"), params, p + "/ffn")
    out = ad.add(hmid, ff)
    if pair_mask is not None:
        out = ad.mul(out, ad.constant(pair_mask[..., None].astype(x.dtype)))
    return out


# ---------------------------------------------------------------------------
# full network


def forward_forces(
    batch: EncodedBatch, params: ParameterStore, positions: Tensor
) -> Tensor:
    """Forces for a padded batch, shape [B, N, 3]; padded rows are zero."""
    cfg = batch.cfg
    b, n = positions.shape[0], positions.shape[1]
    padded = not np.all(batch.atom_mask == 1.0)
    pair_mask = batch.pair_mask() if padded else None
    lmask_add = None
    if padded:
        lmask_add = ((1.0 - batch.atom_mask) * MASK_NEG).reshape(b, 1, 1, 1, n)

    x = embed_batch(batch, params, positions)
    for i in range(cfg.n_layers):
        x = transformer_layer(x, params, i, cfg, pair_mask, lmask_add)

    y1 = _mlp2(x, params, "head/psi1")
    y2 = _mlp2(ad.transpose(x, (0, 2, 1, 3)), params, "head/psi2")
    s = ad.add(y1, y2)
    if padded:
        s = ad.mul(s, ad.constant(batch.atom_mask.reshape(b, 1, n, 1).astype(batch.dtype)))
    pooled = ad.reduce_sum(s, axis=2)
    forces = _mlp2(pooled, params, "head/psi3")
    if padded:
        forces = ad.mul(forces, ad.constant(batch.atom_mask[..., None].astype(batch.dtype)))
    return forces


def predict_forces(system, params: ParameterStore, cfg: ModelConfig) -> np.ndarray:
    """Force prediction for one system, eV/Å. No net-force/torque projection here."""
    batch = EncodedBatch([system], cfg, ad.default_dtype())
    pos = ad.tensor(batch.positions)
    out = forward_forces(batch, params, pos)
    forces = np.asarray(out.data[0], dtype=np.float64)
    if not np.all(np.isfinite(forces)):
        raise FiniteValueError("non-finite force prediction")
    return forces


def force_loss(pred, target) -> Tensor:
    """Mean over atoms of the Euclidean residual norm (zero iff exact match)."""
    pred_t = pred if isinstance(pred, Tensor) else ad.tensor(pred)
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tuple(pred_t.shape) != tuple(target_arr.shape):
        raise ad.ShapeError(
            f"force_loss shapes differ: {tuple(pred_t.shape)} vs {tuple(target_arr.shape)}"
        )
    resid = ad.sub(pred_t, ad.constant(target_arr.astype(pred_t.dtype)))
    return ad.mean(ad.l2norm_lastaxis(resid))


def masked_force_loss(pred: Tensor, target: np.ndarray, atom_mask: np.ndarray) -> Tensor:
    """Batch loss: per-system mean residual norm over real atoms, averaged over systems."""
    b, n = pred.shape[0], pred.shape[1]
    mask3 = ad.constant(atom_mask[..., None].astype(pred.dtype))
    resid = ad.mul(ad.sub(pred, ad.constant(target.astype(pred.dtype))), mask3)
    norms = ad.l2norm_lastaxis(resid)
    counts = atom_mask.sum(axis=1)
    per_system = ad.mul(ad.reduce_sum(norms, axis=1), ad.constant((1.0 / counts).astype(pred.dtype)))
    return ad.mean(per_system)


# ---------------------------------------------------------------------------
# force provider for dynamics and audits


class ModelForceProvider:
    """Binds a trained network to one system's species/spin/charge.

    forces() is pure inference (thread-safe for concurrent distinct systems);
    position_jacobian() differentiates the forward pass, one backward pass
    per output component.
    """

    def __init__(self, params: ParameterStore, cfg: ModelConfig, system):
        self.params = params
        self.cfg = cfg
        self.system = system

    def forces(self, positions: np.ndarray) -> np.ndarray:
        sys2 = self.system.with_positions(positions)
        return predict_forces(sys2, self.params, self.cfg)

    def potential_energy(self, positions: np.ndarray):
        return None  # the network predicts forces directly, no energy head

    def position_jacobian(self, positions: np.ndarray) -> np.ndarray:
        sys2 = self.system.with_positions(positions)
        batch = EncodedBatch([sys2], self.cfg, ad.default_dtype())
        with ad.Tape() as tape:
            pos = ad.tensor(batch.positions)
            out = forward_forces(batch, self.params, pos)
        n3 = out.data.size
        jac = np.zeros((n3, n3))
        seed = np.zeros_like(out.data)
        flat = seed.reshape(-1)
        for a in range(n3):
            flat[a] = 1.0
            (g,) = tape.gradients(out, [pos], seed=seed)
            jac[a] = g.reshape(-1)
            flat[a] = 0.0
        return jac
