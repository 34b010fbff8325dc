"""Decoder-only transformer in numpy with hand-written backprop.

Pre-norm blocks, learned positional embeddings, tied input/output token
embeddings, float64 throughout. The loss is a selective-label cross-entropy:
positions whose label is the ignore sentinel contribute exactly zero, so only
concept tokens are trained on. Single-threaded execution is deterministic
given the seed.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .vocab import IGNORE_LABEL, Vocabulary

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    max_seq_len: int = 256  # full-scale runs in the source setup use 4096
    dropout: float = 0.0
    seed: int = 0
    vocab_size: int = 0  # filled in when parameters are initialised

    def validate(self) -> None:
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.max_seq_len < 16:
            raise ConfigError(f"max_seq_len must be >= 16, got {self.max_seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")


def init_params(cfg: ModelConfig, tok_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Initialise all parameter tensors; the token embedding matrix is taken
    as given (it carries the name-averaged concept rows)."""
    cfg.validate()
    cfg.vocab_size = tok_emb.shape[0]
    if tok_emb.shape[1] != cfg.model_dim:
        raise ConfigError(
            f"embedding dim {tok_emb.shape[1]} does not match model_dim {cfg.model_dim}"
        )
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    p: dict[str, np.ndarray] = {
        "tok_emb": tok_emb.astype(np.float64).copy(),
        "pos_emb": rng.standard_normal((cfg.max_seq_len, cfg.model_dim)) * std,
    }
    D, F = cfg.model_dim, cfg.ff_dim
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"] = np.ones(D)
        p[f"l{i}.ln1.b"] = np.zeros(D)
        p[f"l{i}.attn.wqkv"] = rng.standard_normal((D, 3 * D)) * std
        p[f"l{i}.attn.bqkv"] = np.zeros(3 * D)
        p[f"l{i}.attn.wo"] = rng.standard_normal((D, D)) * resid_std
        p[f"l{i}.attn.bo"] = np.zeros(D)
        p[f"l{i}.ln2.g"] = np.ones(D)
        p[f"l{i}.ln2.b"] = np.zeros(D)
        p[f"l{i}.mlp.wfc"] = rng.standard_normal((D, F)) * std
        p[f"l{i}.mlp.bfc"] = np.zeros(F)
        p[f"l{i}.mlp.wproj"] = rng.standard_normal((F, D)) * resid_std
        p[f"l{i}.mlp.bproj"] = np.zeros(D)
    p["ln_f.g"] = np.ones(D)
    p["ln_f.b"] = np.zeros(D)
    return p


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# --- primitive layers -------------------------------------------------------

def _layer_norm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axes), dy.sum(axes)


def _gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, Dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * Dh)


def _attention_fwd(x, p, i, cfg):
    wqkv, bqkv = p[f"l{i}.attn.wqkv"], p[f"l{i}.attn.bqkv"]
    wo, bo = p[f"l{i}.attn.wo"], p[f"l{i}.attn.bo"]
    B, T, D = x.shape
    qkv = x @ wqkv + bqkv
    q, k, v = (_split_heads(a, cfg.n_heads) for a in np.split(qkv, 3, axis=-1))
    scale = 1.0 / math.sqrt(D // cfg.n_heads)
    att = (q @ k.transpose(0, 1, 3, 2)) * scale
    iu = np.triu_indices(T, k=1)
    att[:, :, iu[0], iu[1]] = -np.inf
    att -= att.max(-1, keepdims=True)
    ea = np.exp(att)
    A = ea / ea.sum(-1, keepdims=True)
    ctx = _merge_heads(A @ v)
    out = ctx @ wo + bo
    return out, (x, q, k, v, A, ctx, scale)


def _attention_bwd(dout, cache, p, i, cfg, grads):
    x, q, k, v, A, ctx, scale = cache
    wqkv, wo = p[f"l{i}.attn.wqkv"], p[f"l{i}.attn.wo"]
    B, T, D = x.shape
    grads[f"l{i}.attn.wo"] += ctx.reshape(-1, D).T @ dout.reshape(-1, D)
    grads[f"l{i}.attn.bo"] += dout.sum((0, 1))
    dctx = _split_heads(dout @ wo.T, cfg.n_heads)
    dA = dctx @ v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ dctx
    datt = A * (dA - (dA * A).sum(-1, keepdims=True))
    dq = (datt @ k) * scale
    dk = (datt.transpose(0, 1, 3, 2) @ q) * scale
    dqkv = np.concatenate([_merge_heads(d) for d in (dq, dk, dv)], axis=-1)
    grads[f"l{i}.attn.wqkv"] += x.reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
    grads[f"l{i}.attn.bqkv"] += dqkv.sum((0, 1))
    return dqkv @ wqkv.T


def _mlp_fwd(x, p, i):
    pre = x @ p[f"l{i}.mlp.wfc"] + p[f"l{i}.mlp.bfc"]
    h, gcache = _gelu_fwd(pre)
    out = h @ p[f"l{i}.mlp.wproj"] + p[f"l{i}.mlp.bproj"]
    return out, (x, h, gcache)


def _mlp_bwd(dout, cache, p, i, grads):
    x, h, gcache = cache
    D = x.shape[-1]
    F = h.shape[-1]
    grads[f"l{i}.mlp.wproj"] += h.reshape(-1, F).T @ dout.reshape(-1, D)
    grads[f"l{i}.mlp.bproj"] += dout.sum((0, 1))
    dpre = _gelu_bwd(dout @ p[f"l{i}.mlp.wproj"].T, gcache)
    grads[f"l{i}.mlp.wfc"] += x.reshape(-1, D).T @ dpre.reshape(-1, F)
    grads[f"l{i}.mlp.bfc"] += dpre.sum((0, 1))
    return dpre @ p[f"l{i}.mlp.wfc"].T


def _dropout_fwd(x, p_drop, rng):
    if rng is None or p_drop <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p_drop) / (1.0 - p_drop)
    return x * mask, mask


def _dropout_bwd(dy, mask):
    return dy if mask is None else dy * mask


# --- full model -------------------------------------------------------------

def forward(params, cfg: ModelConfig, ids: np.ndarray, dropout_rng=None):
    """Return (logits, cache). ids is int (B, T) with T <= max_seq_len."""
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise DataError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    x = params["tok_emb"][ids] + params["pos_emb"][:T]
    x, m_emb = _dropout_fwd(x, cfg.dropout, dropout_rng)
    caches = []
    for i in range(cfg.n_layers):
        n1, c_ln1 = _layer_norm_fwd(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        a, c_att = _attention_fwd(n1, params, i, cfg)
        a, m_att = _dropout_fwd(a, cfg.dropout, dropout_rng)
        x = x + a
        n2, c_ln2 = _layer_norm_fwd(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        m, c_mlp = _mlp_fwd(n2, params, i)
        m, m_mlp = _dropout_fwd(m, cfg.dropout, dropout_rng)
        x = x + m
        caches.append((c_ln1, c_att, m_att, c_ln2, c_mlp, m_mlp))
    h, c_lnf = _layer_norm_fwd(x, params["ln_f.g"], params["ln_f.b"])
    logits = h @ params["tok_emb"].T
    return logits, (ids, m_emb, caches, c_lnf, h)


def loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Mean NLL over supervised positions; returns (loss, dlogits, n_supervised).

    Positions labelled IGNORE_LABEL contribute exactly zero to both the loss
    and the gradient. A batch with zero supervised positions has loss 0.
    """
    mask = labels != IGNORE_LABEL
    n = int(mask.sum())
    dlogits = np.zeros_like(logits)
    if n == 0:
        logger.warning("batch contains no supervised positions; loss is 0")
        return 0.0, dlogits, 0
    rows = logits[mask]
    targets = labels[mask]
    shifted = rows - rows.max(-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(-1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), targets].mean()
    drows = np.exp(logp)
    drows[np.arange(n), targets] -= 1.0
    dlogits[mask] = drows / n
    return float(loss), dlogits, n


def loss(params, cfg: ModelConfig, input_ids: np.ndarray, label_ids: np.ndarray) -> float:
    logits, _ = forward(params, cfg, input_ids)
    value, _, _ = loss_from_logits(logits, label_ids)
    return value


def loss_and_grads(params, cfg: ModelConfig, input_ids: np.ndarray,
                   label_ids: np.ndarray, dropout_rng=None):
    logits, cache = forward(params, cfg, input_ids, dropout_rng)
    value, dlogits, n = loss_from_logits(logits, label_ids)
    grads = zero_grads(params)
    if n == 0:
        return value, grads
    ids, m_emb, caches, c_lnf, h = cache
    B, T = ids.shape
    D = cfg.model_dim
    V = params["tok_emb"].shape[0]
    grads["tok_emb"] += dlogits.reshape(-1, V).T @ h.reshape(-1, D)
    dh = dlogits @ params["tok_emb"]
    dx, dg, db = _layer_norm_bwd(dh, c_lnf)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db
    for i in reversed(range(cfg.n_layers)):
        c_ln1, c_att, m_att, c_ln2, c_mlp, m_mlp = caches[i]
        dm = _dropout_bwd(dx, m_mlp)
        dn2 = _mlp_bwd(dm, c_mlp, params, i, grads)
        dxn, dg, db = _layer_norm_bwd(dn2, c_ln2)
        grads[f"l{i}.ln2.g"] += dg
        grads[f"l{i}.ln2.b"] += db
        dx = dx + dxn
        da = _dropout_bwd(dx, m_att)
        dn1 = _attention_bwd(da, c_att, params, i, cfg, grads)
        dxn, dg, db = _layer_norm_bwd(dn1, c_ln1)
        grads[f"l{i}.ln1.g"] += dg
        grads[f"l{i}.ln1.b"] += db
        dx = dx + dxn
    dx = _dropout_bwd(dx, m_emb)
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, D))
    grads["pos_emb"][:T] += dx.sum(0)
    return value, grads


def next_distribution(params, cfg: ModelConfig, prefix_ids) -> np.ndarray:
    """Softmax over the next token given a 1-D prefix (truncated to the most
    recent max_seq_len ids)."""
    ids = np.asarray(prefix_ids, dtype=np.int64)[-cfg.max_seq_len:]
    logits, _ = forward(params, cfg, ids[None, :])
    row = logits[0, -1]
    row = row - row.max()
    e = np.exp(row)
    return e / e.sum()


def rank_next(params, cfg: ModelConfig, vocab: Vocabulary, prefix_ids,
              concept_type: str | None = None, exclude: frozenset | set = frozenset(),
              n: int = 10) -> list[tuple[str, float]]:
    """Top-n concept codes by raw next-token probability, optionally
    restricted to one concept type and minus an exclusion set. Probabilities
    are not renormalised (ranking-only use); ties break lexicographically."""
    probs = next_distribution(params, cfg, prefix_ids)
    candidates = [
        (vocab.token_of(idx), float(probs[idx]))
        for idx in vocab.concept_ids_of_type(concept_type)
        if vocab.token_of(idx) not in exclude
    ]
    candidates.sort(key=lambda cp: (-cp[1], cp[0]))
    return candidates[:n]
