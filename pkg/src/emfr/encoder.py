"""Bidirectional transformer encoder with a masked-token prediction head.

Forward and backward passes are hand-written numpy. The layout follows the
standard post-norm encoder stack (pre-norm is available via config): learned
absolute positional embeddings, multi-head self-attention, GELU feed-forward,
and a dense + GELU + layer-norm prediction head whose output projection is
tied to the token embeddings by default. Gradients are exact; the test suite
checks them against central finite differences at 64-bit precision.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import kvconfig

LN_EPS = 1e-5
INIT_STD = 0.02


class EncoderError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    hidden_dim: int
    n_heads: int
    ffn_dim: int
    vocab_size: int
    max_positions: int = 512
    dropout: float = 0.1
    pre_norm: bool = False
    tie_embeddings: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.hidden_dim % self.n_heads != 0:
            raise EncoderError("hidden_dim must be divisible by n_heads")
        if self.max_positions < 2:
            raise EncoderError("max_positions must be >= 2")
        if min(self.n_layers, self.hidden_dim, self.n_heads, self.ffn_dim,
               self.vocab_size) < 1:
            raise EncoderError("all size fields must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise EncoderError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "EncoderConfig":
        return cls(
            n_layers=kvconfig.get_int(mapping, "n_layers"),
            hidden_dim=kvconfig.get_int(mapping, "hidden_dim"),
            n_heads=kvconfig.get_int(mapping, "n_heads"),
            ffn_dim=kvconfig.get_int(mapping, "ffn_dim"),
            vocab_size=kvconfig.get_int(mapping, "vocab_size"),
            max_positions=kvconfig.get_int(mapping, "max_positions", 512),
            dropout=kvconfig.get_float(mapping, "dropout", 0.1),
            pre_norm=kvconfig.get_bool(mapping, "pre_norm", False),
            tie_embeddings=kvconfig.get_bool(mapping, "tie_embeddings", True),
            dtype=kvconfig.get_str(mapping, "dtype", "float32"),
        )


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, fully determined by the config."""
    d, f = config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn_" + name] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn_" + name] = (d,)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "ffn_w1"] = (d, f)
        shapes[p + "ffn_b1"] = (f,)
        shapes[p + "ffn_w2"] = (f, d)
        shapes[p + "ffn_b2"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    shapes["head_dense_w"] = (d, d)
    shapes["head_dense_b"] = (d,)
    shapes["head_ln_g"] = (d,)
    shapes["head_ln_b"] = (d,)
    if not config.tie_embeddings:
        shapes["head_out_w"] = (d, config.vocab_size)
    shapes["head_out_b"] = (config.vocab_size,)
    return shapes


def param_count(config: EncoderConfig) -> int:
    total = 0
    for shape in param_shapes(config).values():
        total += int(np.prod(shape))
    return total


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]


def init(config: EncoderConfig, seed: int) -> EncoderModel:
    """Deterministic initialization: N(0, 0.02) weights and embeddings,
    layer-norm gains 1, all biases 0."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:  # layer-norm gains and all biases
            fill = np.ones if name.endswith("_g") else np.zeros
            params[name] = fill(shape, dtype=config.np_dtype)
        else:
            params[name] = (rng.standard_normal(shape) * INIT_STD).astype(config.np_dtype)
    return EncoderModel(config=config, params=params)


@dataclass
class HiddenStates:
    """Per-position vectors after the embedding stage and after each block."""

    layers: list[np.ndarray]

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]


# ---------------------------------------------------------------------------
# primitives

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


# Python floats keep float32 arrays float32 under NEP 50 promotion.
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout(x, rate, train, rng):
    if not train or rate <= 0.0:
        return x, None
    if rng is None:
        raise EncoderError("training-mode forward with dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def _apply_mask(dy, mask):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# forward

def forward(model: EncoderModel, ids: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None,
            ) -> tuple[HiddenStates, np.ndarray, dict]:
    """Run the encoder and prediction head over a batch of id sequences.

    ids: int array (batch, seq_len) or (seq_len,). Returns the hidden states,
    per-position vocabulary logits, and a cache consumed by backward().
    """
    cfg = model.config
    p = model.params
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise EncoderError("ids must be a 1-D or 2-D integer array")
    n = ids.shape[1]
    if n > cfg.max_positions:
        raise EncoderError(f"sequence length {n} exceeds max_positions "
                           f"{cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise EncoderError("token id out of range for vocab_size")

    cache: dict = {"ids": ids, "train": train, "layers": []}

    emb = p["tok_emb"][ids] + p["pos_emb"][:n]
    x, emb_ln = _ln_forward(emb, p["emb_ln_g"], p["emb_ln_b"])
    cache["emb_ln"] = emb_ln
    x, cache["emb_drop"] = _dropout(x, cfg.dropout, train, rng)

    hidden = [x]
    for i in range(cfg.n_layers):
        x, layer_cache = _block_forward(x, i, cfg, p, train, rng)
        cache["layers"].append(layer_cache)
        hidden.append(x)

    logits, cache["head"] = _head_forward(x, cfg, p)
    return HiddenStates(layers=hidden), logits, cache


def _attention_forward(x, i, cfg, p, train, rng):
    b, n, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    pre = f"layer{i}."
    q = x @ p[pre + "attn_wq"] + p[pre + "attn_bq"]
    k = x @ p[pre + "attn_wk"] + p[pre + "attn_bk"]
    v = x @ p[pre + "attn_wv"] + p[pre + "attn_bv"]
    qh = q.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    probs = _softmax(scores)
    probs_kept, attn_mask = _dropout(probs, cfg.dropout, train, rng)
    ctx = (probs_kept @ vh).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = ctx @ p[pre + "attn_wo"] + p[pre + "attn_bo"]
    cache = {"x": x, "qh": qh, "kh": kh, "vh": vh, "probs": probs,
             "probs_kept": probs_kept, "attn_mask": attn_mask, "ctx": ctx}
    return out, cache


def _ffn_forward(x, i, cfg, p):
    pre = f"layer{i}."
    z = x @ p[pre + "ffn_w1"] + p[pre + "ffn_b1"]
    g = _gelu(z)
    out = g @ p[pre + "ffn_w2"] + p[pre + "ffn_b2"]
    return out, {"x": x, "z": z, "g": g}


def _block_forward(x, i, cfg, p, train, rng):
    pre = f"layer{i}."
    lc: dict = {}
    if cfg.pre_norm:
        normed, lc["ln1"] = _ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        attn, lc["attn"] = _attention_forward(normed, i, cfg, p, train, rng)
        attn, lc["attn_drop"] = _dropout(attn, cfg.dropout, train, rng)
        x1 = x + attn
        normed2, lc["ln2"] = _ln_forward(x1, p[pre + "ln2_g"], p[pre + "ln2_b"])
        ffn, lc["ffn"] = _ffn_forward(normed2, i, cfg, p)
        ffn, lc["ffn_drop"] = _dropout(ffn, cfg.dropout, train, rng)
        out = x1 + ffn
    else:
        attn, lc["attn"] = _attention_forward(x, i, cfg, p, train, rng)
        attn, lc["attn_drop"] = _dropout(attn, cfg.dropout, train, rng)
        x1, lc["ln1"] = _ln_forward(x + attn, p[pre + "ln1_g"], p[pre + "ln1_b"])
        ffn, lc["ffn"] = _ffn_forward(x1, i, cfg, p)
        ffn, lc["ffn_drop"] = _dropout(ffn, cfg.dropout, train, rng)
        out, lc["ln2"] = _ln_forward(x1 + ffn, p[pre + "ln2_g"], p[pre + "ln2_b"])
        lc["x1"] = x1
    return out, lc


def _head_forward(h, cfg, p):
    t = h @ p["head_dense_w"] + p["head_dense_b"]
    u = _gelu(t)
    w, head_ln = _ln_forward(u, p["head_ln_g"], p["head_ln_b"])
    out_w = p["tok_emb"].T if cfg.tie_embeddings else p["head_out_w"]
    logits = w @ out_w + p["head_out_b"]
    return logits, {"h": h, "t": t, "u": u, "w": w, "head_ln": head_ln}


# ---------------------------------------------------------------------------
# backward

def backward(model: EncoderModel, cache: dict,
             d_logits: np.ndarray | None = None,
             d_final_hidden: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Exact gradients for every parameter given cotangents of the logits
    and/or of the final hidden states. Shapes mirror params."""
    cfg = model.config
    p = model.params
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    ids = cache["ids"]

    if d_logits is not None:
        dx = _head_backward(d_logits, cfg, p, grads, cache["head"])
    else:
        dx = np.zeros_like(cache["head"]["h"])
    if d_final_hidden is not None:
        dx = dx + d_final_hidden

    for i in reversed(range(cfg.n_layers)):
        dx = _block_backward(dx, i, cfg, p, grads, cache["layers"][i])

    dx = _apply_mask(dx, cache["emb_drop"])
    demb, dg, db = _ln_backward(dx, cache["emb_ln"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db
    np.add.at(grads["tok_emb"], ids, demb)
    grads["pos_emb"][:ids.shape[1]] += demb.sum(axis=0)
    return grads


def _head_backward(d_logits, cfg, p, grads, hc):
    w = hc["w"]
    d = w.shape[-1]
    flat_dl = d_logits.reshape(-1, d_logits.shape[-1])
    flat_w = w.reshape(-1, d)
    if cfg.tie_embeddings:
        grads["tok_emb"] += flat_dl.T @ flat_w
        out_w = p["tok_emb"].T
    else:
        grads["head_out_w"] += flat_w.T @ flat_dl
        out_w = p["head_out_w"]
    grads["head_out_b"] += flat_dl.sum(axis=0)
    dw = d_logits @ out_w.T
    du, dg, db = _ln_backward(dw, hc["head_ln"])
    grads["head_ln_g"] += dg
    grads["head_ln_b"] += db
    dt = du * _gelu_grad(hc["t"])
    flat_dt = dt.reshape(-1, d)
    flat_h = hc["h"].reshape(-1, d)
    grads["head_dense_w"] += flat_h.T @ flat_dt
    grads["head_dense_b"] += flat_dt.sum(axis=0)
    return dt @ p["head_dense_w"].T


def _ffn_backward(dout, i, cfg, p, grads, fc):
    pre = f"layer{i}."
    d, f = cfg.hidden_dim, cfg.ffn_dim
    flat_dout = dout.reshape(-1, d)
    flat_g = fc["g"].reshape(-1, f)
    grads[pre + "ffn_w2"] += flat_g.T @ flat_dout
    grads[pre + "ffn_b2"] += flat_dout.sum(axis=0)
    dg = dout @ p[pre + "ffn_w2"].T
    dz = dg * _gelu_grad(fc["z"])
    flat_dz = dz.reshape(-1, f)
    flat_x = fc["x"].reshape(-1, d)
    grads[pre + "ffn_w1"] += flat_x.T @ flat_dz
    grads[pre + "ffn_b1"] += flat_dz.sum(axis=0)
    return dz @ p[pre + "ffn_w1"].T


def _attention_backward(dout, i, cfg, p, grads, ac):
    pre = f"layer{i}."
    b, n, d = ac["x"].shape
    h, dh = cfg.n_heads, cfg.head_dim
    flat_dout = dout.reshape(-1, d)
    grads[pre + "attn_wo"] += ac["ctx"].reshape(-1, d).T @ flat_dout
    grads[pre + "attn_bo"] += flat_dout.sum(axis=0)
    dctx = (dout @ p[pre + "attn_wo"].T).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    dprobs_kept = dctx @ ac["vh"].transpose(0, 1, 3, 2)
    dvh = ac["probs_kept"].transpose(0, 1, 3, 2) @ dctx
    dprobs = _apply_mask(dprobs_kept, ac["attn_mask"])
    probs = ac["probs"]
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(dh)
    dqh = dscores @ ac["kh"]
    dkh = dscores.transpose(0, 1, 3, 2) @ ac["qh"]
    dq = dqh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dx = np.zeros_like(ac["x"])
    flat_x = ac["x"].reshape(-1, d)
    for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
        flat_dm = dmat.reshape(-1, d)
        grads[pre + "attn_w" + name] += flat_x.T @ flat_dm
        grads[pre + "attn_b" + name] += flat_dm.sum(axis=0)
        dx += dmat @ p[pre + "attn_w" + name].T
    return dx


def _block_backward(dout, i, cfg, p, grads, lc):
    pre = f"layer{i}."
    if cfg.pre_norm:
        dffn = _apply_mask(dout, lc["ffn_drop"])
        dnormed2 = _ffn_backward(dffn, i, cfg, p, grads, lc["ffn"])
        dx1_from_ln, dg, db = _ln_backward(dnormed2, lc["ln2"])
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dx1 = dout + dx1_from_ln
        dattn = _apply_mask(dx1, lc["attn_drop"])
        dnormed = _attention_backward(dattn, i, cfg, p, grads, lc["attn"])
        dx_from_ln, dg, db = _ln_backward(dnormed, lc["ln1"])
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        return dx1 + dx_from_ln
    dsum2, dg, db = _ln_backward(dout, lc["ln2"])
    grads[pre + "ln2_g"] += dg
    grads[pre + "ln2_b"] += db
    dffn = _apply_mask(dsum2, lc["ffn_drop"])
    dx1 = dsum2 + _ffn_backward(dffn, i, cfg, p, grads, lc["ffn"])
    dsum1, dg, db = _ln_backward(dx1, lc["ln1"])
    grads[pre + "ln1_g"] += dg
    grads[pre + "ln1_b"] += db
    dattn = _apply_mask(dsum1, lc["attn_drop"])
    dx = dsum1 + _attention_backward(dattn, i, cfg, p, grads, lc["attn"])
    return dx


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: EncoderModel, directory: str | Path) -> None:
    """Checkpoint = config file + params.bin (one blob per parameter) +
    manifest (name, dtype, shape, byte offset, sha256)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kvconfig.write_kv(model.config.to_mapping(), directory / "config")
    save_blobs(model.params, directory / "params.bin", directory / "manifest.tsv")


def save_blobs(arrays: dict[str, np.ndarray], bin_path: Path,
               manifest_path: Path) -> None:
    rows = []
    offset = 0
    with open(bin_path, "wb") as handle:
        for name in arrays:
            arr = np.ascontiguousarray(arrays[name])
            blob = arr.tobytes()
            handle.write(blob)
            digest = hashlib.sha256(blob).hexdigest()
            shape = "x".join(str(s) for s in arr.shape)
            rows.append(f"{name}\t{arr.dtype.name}\t{shape}\t{offset}\t{digest}")
            offset += len(blob)
    manifest_path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_blobs(bin_path: Path, manifest_path: Path) -> dict[str, np.ndarray]:
    blob = Path(bin_path).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for line in Path(manifest_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, dtype, shape_text, offset_text, digest = line.split("\t")
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        offset = int(offset_text)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        chunk = blob[offset:offset + nbytes]
        if hashlib.sha256(chunk).hexdigest() != digest:
            raise CheckpointError(f"checksum mismatch for parameter {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
    return arrays


def load_checkpoint(directory: str | Path) -> EncoderModel:
    directory = Path(directory)
    config = EncoderConfig.from_mapping(kvconfig.read_kv(directory / "config"))
    params = load_blobs(directory / "params.bin", directory / "manifest.tsv")
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise CheckpointError("checkpoint parameters do not match the config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape "
                                  f"{params[name].shape}, expected {shape}")
    return EncoderModel(config=config, params=params)
