"""Point-cloud prompt encoder and decoder-only mesh-token model.

The prompt encoder turns an oriented cloud into a fixed number of
embeddings: learned queries cross-attend over per-point features, so the
result does not depend on point order. The token model sees
[prompt, BOS, t1, ...] with a prefix-LM mask (prompt rows fully visible,
token rows causal) and predicts the next token.
"""
from __future__ import annotations

import numpy as np

from ..errors import MalformedSequence, MissingNormals, VocabularyOverflow
from ..geometry import PointCloud
from ..metrics import resample
from ..rng import make_rng
from ..tokenizer import TokenSequence, Vocabulary
from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import ParamStore, linear
from .vae import LossBreakdown

NEG_INF = -1e9


def _vocab(cfg: ModelConfig) -> Vocabulary:
    return Vocabulary(cfg.coord_bins)


# --------------------------------------------------------------------------
# prompt encoder


def point_features(cloud: PointCloud, cfg: ModelConfig) -> np.ndarray:
    """Position, its Fourier features and the normal for every point."""
    if not cloud.has_normals:
        raise MissingNormals("the prompt cloud needs normals")
    x = cloud.positions
    freqs = np.pi * 2.0 ** np.arange(cfg.prompt_freqs)
    ang = (x[:, :, None] * freqs).reshape(len(x), -1)
    return np.hstack([x, np.sin(ang), np.cos(ang), cloud.normals])


def _feature_dim(cfg: ModelConfig) -> int:
    return 6 + 6 * cfg.prompt_freqs


def _ln_params(params: ParamStore, name: str, d: int) -> None:
    params.ones(f"{name}.g", (d,))
    params.zeros(f"{name}.b", (d,))


def _ln(x: Tensor, p: dict, name: str) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def init_prompt_encoder(params: ParamStore, cfg: ModelConfig) -> None:
    d = cfg.ar_width
    params.linear("ep.in", _feature_dim(cfg), d)
    params.linear("ep.in2", d, d)
    params.normal("ep.query", (cfg.prompt_len, d), 1.0)
    for n in ("q", "k", "v", "o"):
        params.linear(f"ep.{n}", d, d)
    _ln_params(params, "ep.ln1", d)
    params.linear("ep.mlp1", d, 2 * d)
    params.linear("ep.mlp2", 2 * d, d)
    _ln_params(params, "ep.ln2", d)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return ad.softmax(scores, axis=-1) @ v


def prompt_subset(cloud: PointCloud, cfg: ModelConfig, seed: int = 0) -> PointCloud:
    """A fixed-size subset (or cyclic repetition) of the prompt cloud."""
    idx = resample(np.arange(len(cloud)), cfg.prompt_points, make_rng(seed, "prompt"))
    return cloud.subset(idx)


def encode_prompt(cloud: PointCloud, params: dict, cfg: ModelConfig) -> Tensor:
    """Exactly ``prompt_len`` embeddings of width ``ar_width``."""
    if len(cloud) == 0:
        raise MissingNormals("the prompt cloud is empty")
    feats = Tensor(point_features(cloud, cfg))
    h = linear(ad.silu(linear(feats, params, "ep.in")), params, "ep.in2")
    query = params["ep.query"]
    heads = cfg.ar_heads
    q = _split_heads(linear(query, params, "ep.q"), heads)
    k = _split_heads(linear(h, params, "ep.k"), heads)
    v = _split_heads(linear(h, params, "ep.v"), heads)
    y = linear(_merge_heads(_attend(q, k, v)), params, "ep.o")
    y = _ln(query + y, params, "ep.ln1")
    y = _ln(y + linear(ad.silu(linear(y, params, "ep.mlp1")), params, "ep.mlp2"), params, "ep.ln2")
    return y


# --------------------------------------------------------------------------
# token model


def init_ar(params: ParamStore, cfg: ModelConfig) -> None:
    d, v = cfg.ar_width, _vocab(cfg).size
    params.normal("ar.tok", (v, d), 0.1)
    params.normal("ar.pos", (cfg.ar_max_len, d), 0.02)
    params.normal("ar.ppos", (cfg.prompt_len, d), 0.02)
    for b in range(cfg.ar_blocks):
        _ln_params(params, f"ar.b{b}.ln1", d)
        params.linear(f"ar.b{b}.qkv", d, 3 * d)
        params.linear(f"ar.b{b}.o", d, d, scale=0.5)
        _ln_params(params, f"ar.b{b}.ln2", d)
        params.linear(f"ar.b{b}.mlp1", d, 4 * d)
        params.linear(f"ar.b{b}.mlp2", 4 * d, d, scale=0.5)
    _ln_params(params, "ar.lnf", d)
    params.linear("ar.head", d, v)


def prefix_mask(m: int, n: int) -> np.ndarray:
    """Additive attention bias: row i may see column j when j < m or j <= i."""
    s = m + n
    i, j = np.arange(s)[:, None], np.arange(s)[None, :]
    return np.where((j < m) | (j <= i), 0.0, NEG_INF)


def ar_forward(params: dict, prompt: Tensor, tokens: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Next-token logits (n, V) for every position of ``tokens``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n, m = len(tokens), prompt.shape[0]
    if n > cfg.ar_max_len:
        raise MalformedSequence(f"sequence of {n} tokens exceeds the context of {cfg.ar_max_len}")
    emb = ad.gather_rows(params["ar.tok"], tokens) + params["ar.pos"][:n]
    x = ad.concat([prompt + params["ar.ppos"][:m], emb], axis=0)
    bias = prefix_mask(m, n)
    d, heads = cfg.ar_width, cfg.ar_heads
    for b in range(cfg.ar_blocks):
        a = _ln(x, params, f"ar.b{b}.ln1")
        qkv = linear(a, params, f"ar.b{b}.qkv").reshape(m + n, 3, heads, d // heads).transpose(1, 2, 0, 3)
        att = _attend(qkv[0], qkv[1], qkv[2], bias)
        x = x + linear(_merge_heads(att), params, f"ar.b{b}.o")
        a = _ln(x, params, f"ar.b{b}.ln2")
        x = x + linear(ad.silu(linear(a, params, f"ar.b{b}.mlp1")), params, f"ar.b{b}.mlp2")
    return linear(_ln(x[m:], params, "ar.lnf"), params, "ar.head")


def _check_vocab(tokens: np.ndarray, cfg: ModelConfig) -> None:
    v = _vocab(cfg).size
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= v):
        raise VocabularyOverflow(f"token ids must lie in [0, {v})")


def ar_loss_from_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    return ad.cross_entropy(logits, targets, weights)


def _prompt(params: dict, prompt, cfg: ModelConfig, seed: int = 0) -> Tensor:
    if isinstance(prompt, PointCloud):
        return encode_prompt(prompt_subset(prompt, cfg, seed), params, cfg)
    return ad.as_tensor(prompt)


def ar_loss(params: dict, prompt, target: TokenSequence, cfg: ModelConfig, prompt_seed: int = 0) -> LossBreakdown:
    """Mean next-token cross-entropy; ``prompt`` is a cloud or its embeddings.

    ``prompt_seed`` picks which fixed-size subset of a prompt cloud is used.
    """
    seq = target.array()
    _check_vocab(seq, cfg)
    if len(seq) < 2:
        raise MalformedSequence("need at least two tokens to form a target")
    logits = ar_forward(params, _prompt(params, prompt, cfg, prompt_seed), seq[:-1], cfg)
    xent = ar_loss_from_logits(logits, seq[1:])
    return LossBreakdown(xent, {"xent": float(xent.data)}, {"xent": 1.0})


def ar_generate(
    params: dict,
    prompt,
    cfg: ModelConfig,
    max_len: int | None = None,
    temperature: float = 0.0,
    seed: int = 0,
) -> TokenSequence:
    """Decode from BOS until EOS or ``max_len`` tokens.

    ``temperature`` 0 is greedy; otherwise tokens are drawn from the
    tempered softmax with a seeded generator. BOS and PAD are never emitted.
    """
    vocab = _vocab(cfg)
    max_len = min(max_len or cfg.ar_max_len, cfg.ar_max_len)
    rng = make_rng(seed, "ar_generate")
    out = [vocab.bos]
    with ad.no_grad():
        emb = _prompt(params, prompt, cfg)
        while len(out) < max_len:
            logits = ar_forward(params, emb, np.asarray(out), cfg).data[-1].copy()
            logits[[vocab.bos, vocab.pad]] = -np.inf
            if temperature <= 0:
                tok = int(np.argmax(logits))
            else:
                z = logits / temperature
                prob = np.exp(z - z.max())
                tok = int(rng.choice(len(prob), p=prob / prob.sum()))
            out.append(tok)
            if tok == vocab.eos:
                break
    return TokenSequence(out, "mesh")
