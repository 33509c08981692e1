"""Representation, dynamics and prediction networks.

The dynamics network is a small pre-norm transformer encoder that maps
a root latent plus a sequence of action tokens to one latent per
position. Which positions may attend to which is entirely determined
by a boolean mask, so the same forward pass serves two callers:

* training unrolls a flat action sequence under a lower-triangular
  mask, and
* the planner feeds the actions of a whole subtree under an ancestor
  mask, computing every node latent of the subtree in one pass.

Masks are plain boolean numpy arrays; ``allow[i][j]`` means position i
may read position j. Position 0 always holds the root latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, MaskError, ShapeError


@dataclass
class NetworkConfig:
    obs_dim: int = 31
    num_actions: int = 3
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 2
    rep_hidden: int = 64
    ff_hidden: int = 128
    head_hidden: int = 32
    dtype: str = "float64"
    # Optional min-max rescaling of each latent row to [0, 1]. Off by
    # default; the environments here train fine without it.
    scale_latents: bool = False
    pe_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for sinusoidal encodings")
        if self.d_model % self.num_heads != 0:
            raise ConfigError("num_heads must divide d_model")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype '{self.dtype}'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def sinusoidal_encoding(depths, d_model: int, base: float = 10000.0) -> np.ndarray:
    """Classic sin/cos position code for integer tree depths.

    Even channels carry sin(depth / base^(2i/d)), odd channels the
    matching cos. Returns float64, shape (len(depths), d_model).
    """
    depths = np.asarray(depths, dtype=np.float64).reshape(-1, 1)
    i = np.arange(d_model // 2, dtype=np.float64)
    freq = base ** (2.0 * i / d_model)
    pe = np.empty((depths.shape[0], d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(depths / freq)
    pe[:, 1::2] = np.cos(depths / freq)
    return pe


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular allow mask: position i reads positions 0..i."""
    return np.tril(np.ones((n, n), dtype=bool))


def ancestor_mask(parents) -> np.ndarray:
    """Allow mask for a token tree given per-token parent positions.

    ``parents[i]`` is the mask index of token i+1's parent; index 0 is
    the root token, which has no entry. Each token may read itself and
    its ancestors, nothing else. Parents must precede children, so
    ``parents[i] <= i`` (both in token order), otherwise the structure
    is rejected.
    """
    n = len(parents) + 1
    allow = np.zeros((n, n), dtype=bool)
    allow[0, 0] = True
    for i, p in enumerate(parents):
        pos = i + 1
        p = int(p)
        if not 0 <= p < pos:
            raise MaskError(
                f"token {pos} has parent position {p}; parents must precede children"
            )
        allow[pos] = allow[p]
        allow[pos, pos] = True
    return allow


def _linear(params, name, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _mlp(params, name, x: Tensor) -> Tensor:
    return _linear(params, f"{name}.out", ad.gelu(_linear(params, f"{name}.in", x)))


def _rescale_rows(x: Tensor) -> Tensor:
    """Min-max scale the last axis of ``x`` into [0, 1]."""
    lo = ad.reduce_min(x, axis=-1, keepdims=True)
    hi = ad.reduce_max(x, axis=-1, keepdims=True)
    span = ad.sub(hi, lo)
    span = ad.add(span, ad.tensor(np.full(span.shape, 1e-8), dtype=x.dtype))
    return ad.mul(ad.sub(x, lo), ad.reciprocal(span))


def represent(params, cfg: NetworkConfig, obs: Tensor) -> Tensor:
    """Observation batch (..., obs_dim) to latent batch (..., d_model)."""
    if obs.shape[-1] != cfg.obs_dim:
        raise ShapeError(
            f"observation dim {obs.shape[-1]} != configured {cfg.obs_dim}"
        )
    z = _mlp(params, "rep", obs)
    if cfg.scale_latents:
        z = _rescale_rows(z)
    return z


def embed_actions(params, cfg: NetworkConfig, action_ids, depths) -> Tensor:
    """Action ids (..., n) and depths (n,) to tokens (..., n, d_model)."""
    ids = np.asarray(action_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.num_actions):
        raise ShapeError(
            f"action id out of range 0..{cfg.num_actions - 1}"
        )
    tok = ad.gather(params["embed.table"], ids)
    pe = sinusoidal_encoding(depths, cfg.d_model, cfg.pe_base)
    if pe.shape[0] != ids.shape[-1]:
        raise ShapeError(
            f"got {pe.shape[0]} depths for {ids.shape[-1]} actions"
        )
    return ad.add(tok, ad.tensor(pe.astype(cfg.np_dtype)))


def encode_sequence(params, cfg: NetworkConfig, seq: Tensor,
                    allow: np.ndarray) -> Tensor:
    """Run the transformer encoder over ``seq`` under the allow mask.

    ``seq`` is (..., n, d_model); ``allow`` must broadcast against the
    (..., heads, n, n) attention scores. Output i depends exactly on
    the inputs j with allow[i][j]; everything else gets zero weight and
    zero gradient.
    """
    n = seq.shape[-2]
    allow = np.asarray(allow)
    if allow.shape[-2:] != (n, n):
        raise MaskError(
            f"mask shape {allow.shape} does not match {n} positions"
        )
    h = cfg.num_heads
    dh = cfg.d_model // h
    x = seq
    batched = seq.ndim == 3
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    for layer in range(cfg.num_layers):
        pre = f"block{layer}"
        hn = ad.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = _linear(params, f"{pre}.q", hn)
        k = _linear(params, f"{pre}.k", hn)
        v = _linear(params, f"{pre}.v", hn)

        def split_heads(t):
            if batched:
                b = t.shape[0]
                return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))
            return ad.transpose(ad.reshape(t, (n, h, dh)), (1, 0, 2))

        qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
        kt = ad.transpose(kh, (0, 1, 3, 2) if batched else (0, 2, 1))
        scores = ad.scale(ad.matmul(qh, kt), inv_sqrt_dh)
        probs = ad.masked_softmax(scores, allow)
        att = ad.matmul(probs, vh)
        if batched:
            b = att.shape[0]
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, n, cfg.d_model))
        else:
            att = ad.reshape(ad.transpose(att, (1, 0, 2)), (n, cfg.d_model))
        x = ad.add(x, _linear(params, f"{pre}.attn_out", att))
        hn2 = ad.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        ff = _linear(params, f"{pre}.ff_out",
                     ad.gelu(_linear(params, f"{pre}.ff_in", hn2)))
        x = ad.add(x, ff)
    out = ad.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    if cfg.scale_latents:
        out = _rescale_rows(out)
    return out


def dynamics_forward(params, cfg: NetworkConfig, root_latent: Tensor,
                     action_ids, depths, allow: np.ndarray) -> Tensor:
    """Latents for [root] + one token per action, under ``allow``.

    ``root_latent`` is (d_model,) or (batch, d_model); actions have a
    matching leading batch axis when batched. The mask covers the full
    n+1 token sequence including the root at position 0.
    """
    ids = np.asarray(action_ids, dtype=np.int64)
    batched = root_latent.ndim == 2
    if batched:
        b = root_latent.shape[0]
        root = ad.reshape(root_latent, (b, 1, cfg.d_model))
        tokens = embed_actions(params, cfg, ids, depths)
        seq = ad.concat([root, tokens], axis=1)
    else:
        root = ad.reshape(root_latent, (1, cfg.d_model))
        tokens = embed_actions(params, cfg, ids, depths)
        seq = ad.concat([root, tokens], axis=0)
    return encode_sequence(params, cfg, seq, allow)


def predict(params, cfg: NetworkConfig, latents: Tensor):
    """Value, reward and policy logits for latent batch (..., d_model).

    Returns (values, rewards, logits) where values and rewards drop the
    trailing singleton axis.
    """
    value = _mlp(params, "value", latents)
    reward = _mlp(params, "reward", latents)
    logits = _mlp(params, "policy", latents)
    lead = latents.shape[:-1]
    return (
        ad.reshape(value, lead),
        ad.reshape(reward, lead),
        logits,
    )


# ---------------------------------------------------------------------------
# parameter construction and the bundle used by the planner


def _init_linear(rng, fan_in, fan_out, dtype, zero=False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return (
        Tensor(w.astype(dtype)),
        Tensor(np.zeros(fan_out, dtype=dtype)),
    )


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> dict:
    """He-initialized weights; head output layers start at zero so the
    untrained prior is uniform and value/reward predictions are 0."""
    dt = cfg.np_dtype
    params = {}

    def linear(name, fi, fo, zero=False):
        w, b = _init_linear(rng, fi, fo, dt, zero=zero)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b

    def norm(name):
        params[f"{name}.g"] = Tensor(np.ones(cfg.d_model, dtype=dt))
        params[f"{name}.b"] = Tensor(np.zeros(cfg.d_model, dtype=dt))

    linear("rep.in", cfg.obs_dim, cfg.rep_hidden)
    linear("rep.out", cfg.rep_hidden, cfg.d_model)
    params["embed.table"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model),
                   size=(cfg.num_actions, cfg.d_model)).astype(dt))
    for layer in range(cfg.num_layers):
        pre = f"block{layer}"
        norm(f"{pre}.ln1")
        linear(f"{pre}.q", cfg.d_model, cfg.d_model)
        linear(f"{pre}.k", cfg.d_model, cfg.d_model)
        linear(f"{pre}.v", cfg.d_model, cfg.d_model)
        linear(f"{pre}.attn_out", cfg.d_model, cfg.d_model)
        norm(f"{pre}.ln2")
        linear(f"{pre}.ff_in", cfg.d_model, cfg.ff_hidden)
        linear(f"{pre}.ff_out", cfg.ff_hidden, cfg.d_model)
    norm("final_ln")
    for head, out in (("value", 1), ("reward", 1), ("policy", cfg.num_actions)):
        linear(f"{head}.in", cfg.d_model, cfg.head_hidden)
        linear(f"{head}.out", cfg.head_hidden, out, zero=True)
    return params


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class NetworkBundle:
    """All three networks plus the numpy-level interface the planner uses.

    The planner never touches tensors or tapes: it hands in arrays and
    gets arrays back, which also lets a hand-written model (e.g. an
    exact simulator) stand in for the learned one in tests.
    """

    cfg: NetworkConfig
    params: dict = field(repr=False)

    @property
    def num_actions(self) -> int:
        return self.cfg.num_actions

    def represent(self, obs: np.ndarray) -> np.ndarray:
        obs_t = Tensor(np.asarray(obs, dtype=self.cfg.np_dtype).reshape(1, -1))
        return represent(self.params, self.cfg, obs_t).data[0]

    def forward_tokens(self, root_latent: np.ndarray, actions, depths,
                       parents) -> np.ndarray:
        """Latents (n+1, d_model) for the root plus each action token.

        ``parents[i]`` gives the token position (0 = root) that action
        token i+1 hangs under; the ancestor mask is built from it.
        """
        allow = ancestor_mask(parents)
        root = Tensor(np.asarray(root_latent, dtype=self.cfg.np_dtype))
        out = dynamics_forward(self.params, self.cfg, root,
                               np.asarray(actions, dtype=np.int64),
                               depths, allow)
        return out.data

    def predict(self, latents: np.ndarray):
        """(values, rewards, prior_probs) for a latent batch (m, d)."""
        lat = Tensor(np.asarray(latents, dtype=self.cfg.np_dtype))
        v, r, logits = predict(self.params, self.cfg, lat)
        return (
            v.data.astype(np.float64),
            r.data.astype(np.float64),
            softmax(logits.data).astype(np.float64),
        )


def init_network(cfg: NetworkConfig, rng: np.random.Generator) -> NetworkBundle:
    return NetworkBundle(cfg=cfg, params=init_params(cfg, rng))
