"""A small Llama-style decoder with hand-written reverse-mode gradients.

Each block is RMSNorm -> QKV -> grouped-query causal attention -> O ->
residual -> RMSNorm -> FC1 (gate and up) -> SwiGLU -> FC2 -> residual.
The four linear layers run through fake quantization according to a
QuantPlan; gradients pass through the quantizers with the straight-through
estimator. Positions use a learned absolute embedding.

All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qsl import quant
from qsl.errors import ConfigError, NonFiniteGradient, NonFiniteLoss
from qsl.quant import LAYER_KINDS, QuantPlan

NORM_EPS = 1e-12
INIT_STD = 0.02


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 2
    hidden: int = 64
    ffn_hidden: int = 128
    heads: int = 4
    kv_heads: int = 2
    vocab: int = 256
    seq_len: int = 64

    def __post_init__(self):
        if min(self.layers, self.hidden, self.ffn_hidden, self.heads, self.kv_heads,
               self.vocab, self.seq_len) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.hidden % self.heads:
            raise ConfigError("hidden size must be divisible by the number of heads")
        if self.heads % self.kv_heads:
            raise ConfigError("heads must be divisible by kv_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    def check_plan(self, plan: QuantPlan) -> None:
        """Raise GranularityMismatch if a plan's groups do not tile the layer widths."""
        fan_in = {"qkv": self.hidden, "o": self.hidden, "fc1": self.hidden, "fc2": self.ffn_hidden}
        for kind in LAYER_KINDS:
            for role in ("weight", "input"):
                cfg = plan[(kind, role)]
                if not cfg.is_identity:
                    cfg.granularity.group_len(1, fan_in[kind])


def param_count(cfg: ToyModelConfig) -> int:
    h, f = cfg.hidden, cfg.ffn_hidden
    block = h * (h + 2 * cfg.kv_dim) + h * h + 2 * h * f + f * h + 2 * h
    return cfg.vocab * h + cfg.seq_len * h + cfg.layers * block + h + h * cfg.vocab


@dataclass
class ToyModel:
    cfg: ToyModelConfig
    params: dict
    # trainable quantizer state keyed "blocks.{i}.{kind}.{role}"
    qstate: dict = field(default_factory=dict)

    def copy(self) -> "ToyModel":
        return ToyModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.qstate.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build_model(cfg: ToyModelConfig, seed: int = 0) -> ToyModel:
    rng = np.random.default_rng(seed)
    h, f = cfg.hidden, cfg.ffn_hidden
    resid_std = INIT_STD / math.sqrt(2 * cfg.layers)
    p = {
        "tok_emb": _trunc_normal(rng, (cfg.vocab, h), INIT_STD),
        "pos_emb": _trunc_normal(rng, (cfg.seq_len, h), INIT_STD),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        p[b + "norm1"] = np.ones(h)
        p[b + "qkv"] = _trunc_normal(rng, (h + 2 * cfg.kv_dim, h), INIT_STD)
        p[b + "o"] = _trunc_normal(rng, (h, h), resid_std)
        p[b + "norm2"] = np.ones(h)
        p[b + "fc1"] = _trunc_normal(rng, (2 * f, h), INIT_STD)
        p[b + "fc2"] = _trunc_normal(rng, (h, f), resid_std)
    p["norm_f"] = np.ones(h)
    p["head"] = _trunc_normal(rng, (cfg.vocab, h), INIT_STD)
    return ToyModel(cfg, p)


def init_quant_state(model: ToyModel, plan: QuantPlan) -> None:
    """Create trainable quantizer state for every LSQ/LWC/LAC entry of ``plan``."""
    model.cfg.check_plan(plan)
    fan_in = {"qkv": model.cfg.hidden, "o": model.cfg.hidden, "fc1": model.cfg.hidden,
              "fc2": model.cfg.ffn_hidden}
    model.qstate.clear()
    for i in range(model.cfg.layers):
        for kind in LAYER_KINDS:
            wcfg = plan[(kind, "weight")]
            acfg = plan[(kind, "input")]
            if wcfg.quantizer == "lac":
                raise ConfigError("LAC applies to activations only")
            if acfg.quantizer in ("lsq", "lwc") and not acfg.is_identity:
                raise ConfigError(f"{acfg.quantizer} applies to weights only")
            w = model.params[f"blocks.{i}.{kind}"]
            state = quant.init_learned(w, wcfg)
            if state is not None:
                model.qstate[f"blocks.{i}.{kind}.weight"] = state
            if not acfg.is_identity and acfg.quantizer == "lac":
                n = fan_in[kind] // acfg.granularity.group_len(1, fan_in[kind])
                model.qstate[f"blocks.{i}.{kind}.input"] = np.ones(n)


# layer primitives: each returns (output, cache) and has a matching backward


def rmsnorm(x, gain):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xn = x * r
    return xn * gain, (xn, r, gain)


def rmsnorm_backward(dy, cache):
    xn, r, gain = cache
    dgain = np.sum(dy * xn, axis=tuple(range(dy.ndim - 1)))
    u = dy * gain
    dx = r * (u - xn * np.mean(u * xn, axis=-1, keepdims=True))
    return dx, dgain


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def qlinear(x, w, wcfg, acfg, wstate=None, astate=None):
    """``y = Q(x) @ Q(w).T`` with x of shape (tokens, in) and w of shape (out, in)."""
    xq, xmask = quant.fake_quantize_ste(x, acfg, astate)
    wq, wmask = quant.fake_quantize_ste(w, wcfg, wstate)
    return xq @ wq.T, (x, w, xq, wq, xmask, wmask, wcfg, acfg, wstate, astate)


def qlinear_backward(dy, cache):
    x, w, xq, wq, xmask, wmask, wcfg, acfg, wstate, astate = cache
    dxq = dy @ wq
    dwq = dy.T @ xq
    dx = np.where(xmask, dxq, 0.0)
    dw = np.where(wmask, dwq, 0.0)
    dws = quant.learned_param_grad(dwq, w, wcfg, wstate) if wstate is not None else None
    das = quant.learned_param_grad(dxq, x, acfg, astate) if astate is not None else None
    return dx, dw, dws, das


def attention(qkv, cfg: ToyModelConfig, B: int, T: int):
    """Causal grouped-query attention on a (B*T, hidden + 2*kv_dim) projection."""
    H, KV, dh = cfg.heads, cfg.kv_heads, cfg.head_dim
    rep = H // KV
    h, kvd = cfg.hidden, cfg.kv_dim
    q = qkv[:, :h].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    k = qkv[:, h : h + kvd].reshape(B, T, KV, dh).transpose(0, 2, 1, 3)
    v = qkv[:, h + kvd :].reshape(B, T, KV, dh).transpose(0, 2, 1, 3)
    ke = np.repeat(k, rep, axis=1)
    ve = np.repeat(v, rep, axis=1)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ ke.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    probs = softmax(scores)
    out = probs @ ve
    out2 = out.transpose(0, 2, 1, 3).reshape(B * T, h)
    return out2, (q, ke, ve, probs, scale, B, T)


def attention_backward(dout2, cache, cfg: ToyModelConfig):
    q, ke, ve, probs, scale, B, T = cache
    H, KV, dh = cfg.heads, cfg.kv_heads, cfg.head_dim
    rep = H // KV
    dout = dout2.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    dprobs = dout @ ve.transpose(0, 1, 3, 2)
    dve = probs.transpose(0, 1, 3, 2) @ dout
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ ke
    dke = dscores.transpose(0, 1, 3, 2) @ q
    dk = dke.reshape(B, KV, rep, T, dh).sum(axis=2)
    dv = dve.reshape(B, KV, rep, T, dh).sum(axis=2)

    def flat(t, n):
        return t.transpose(0, 2, 1, 3).reshape(B * T, n * dh)

    return np.concatenate([flat(dq, H), flat(dk, KV), flat(dv, KV)], axis=1)


@dataclass
class ForwardResult:
    loss: float
    taps: dict  # "blocks.{i}.{kind}" -> pre-quantization input activations
    cache: object = field(default=None, repr=False)


def _qargs(model: ToyModel, plan: QuantPlan, i: int, kind: str):
    return (
        plan[(kind, "weight")],
        plan[(kind, "input")],
        model.qstate.get(f"blocks.{i}.{kind}.weight"),
        model.qstate.get(f"blocks.{i}.{kind}.input"),
    )


def forward(model: ToyModel, tokens, plan: QuantPlan | None = None) -> ForwardResult:
    """Mean next-token cross-entropy (nats) on a (batch, seq_len + 1) token array."""
    cfg = model.cfg
    plan = plan or QuantPlan.uniform()
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ConfigError("tokens must be a (batch, length) array")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ConfigError("token id out of vocabulary range")
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    B, T = inp.shape
    if T > cfg.seq_len:
        raise ConfigError(f"sequence length {T} exceeds model limit {cfg.seq_len}")
    h = cfg.hidden

    x = p["tok_emb"][inp] + p["pos_emb"][:T]
    x = x.reshape(B * T, h)
    taps, blocks = {}, []
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        c = {}
        a_in, c["n1"] = rmsnorm(x, p[b + "norm1"])
        taps[b + "qkv"] = a_in
        qkv, c["qkv"] = qlinear(a_in, p[b + "qkv"], *_qargs(model, plan, i, "qkv"))
        att, c["att"] = attention(qkv, cfg, B, T)
        taps[b + "o"] = att
        o, c["o"] = qlinear(att, p[b + "o"], *_qargs(model, plan, i, "o"))
        x = x + o
        m_in, c["n2"] = rmsnorm(x, p[b + "norm2"])
        taps[b + "fc1"] = m_in
        gu, c["fc1"] = qlinear(m_in, p[b + "fc1"], *_qargs(model, plan, i, "fc1"))
        f = cfg.ffn_hidden
        gate, up = gu[:, :f], gu[:, f:]
        sg, sig = _silu(gate)
        act = sg * up
        c["swiglu"] = (gate, up, sg, sig)
        taps[b + "fc2"] = act
        y, c["fc2"] = qlinear(act, p[b + "fc2"], *_qargs(model, plan, i, "fc2"))
        x = x + y
        blocks.append(c)

    xf, nf_cache = rmsnorm(x, p["norm_f"])
    logits = xf @ p["head"].T
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = tgt.reshape(-1)
    loss = -float(np.mean(logp[np.arange(t.size), t]))
    if not np.isfinite(loss):
        raise NonFiniteLoss("loss is not finite")
    cache = (inp, t, blocks, xf, nf_cache, logp, B, T)
    return ForwardResult(loss, taps, cache)


def backward(model: ToyModel, fwd: ForwardResult, loss_weight: float = 1.0):
    """Gradients of ``loss_weight * loss`` for every parameter and quantizer state.

    Returns ``(grads, qgrads)`` keyed like ``model.params`` and ``model.qstate``.
    """
    cfg = model.cfg
    p = model.params
    inp, t, blocks, xf, nf_cache, logp, B, T = fwd.cache
    h, f = cfg.hidden, cfg.ffn_hidden
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    qgrads = {}

    dlogits = np.exp(logp)
    dlogits[np.arange(t.size), t] -= 1.0
    dlogits *= loss_weight / t.size
    grads["head"] = dlogits.T @ xf
    dxf = dlogits @ p["head"]
    dx, grads["norm_f"] = rmsnorm_backward(dxf, nf_cache)

    for i in reversed(range(cfg.layers)):
        b = f"blocks.{i}."
        c = blocks[i]
        # feed-forward branch
        dact, grads[b + "fc2"], dws, das = qlinear_backward(dx, c["fc2"])
        _store_q(qgrads, b + "fc2", dws, das)
        gate, up, sg, sig = c["swiglu"]
        dgate = dact * up * sig * (1.0 + gate * (1.0 - sig))
        dup = dact * sg
        dm_in, grads[b + "fc1"], dws, das = qlinear_backward(
            np.concatenate([dgate, dup], axis=1), c["fc1"]
        )
        _store_q(qgrads, b + "fc1", dws, das)
        dn2, grads[b + "norm2"] = rmsnorm_backward(dm_in, c["n2"])
        dx = dx + dn2
        # attention branch
        datt, grads[b + "o"], dws, das = qlinear_backward(dx, c["o"])
        _store_q(qgrads, b + "o", dws, das)
        dqkv = attention_backward(datt, c["att"], cfg)
        da_in, grads[b + "qkv"], dws, das = qlinear_backward(dqkv, c["qkv"])
        _store_q(qgrads, b + "qkv", dws, das)
        dn1, grads[b + "norm1"] = rmsnorm_backward(da_in, c["n1"])
        dx = dx + dn1

    dx = dx.reshape(B, T, h)
    np.add.at(grads["tok_emb"], inp, dx)
    grads["pos_emb"][:T] = dx.sum(axis=0)
    for k, g in list(grads.items()) + list(qgrads.items()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    return grads, qgrads


def _store_q(qgrads, prefix, dws, das):
    if dws is not None:
        qgrads[prefix + ".weight"] = dws
    if das is not None:
        qgrads[prefix + ".input"] = das


def loss_and_grads(model: ToyModel, tokens, plan: QuantPlan | None = None, loss_weight: float = 1.0):
    fwd = forward(model, tokens, plan)
    grads, qgrads = backward(model, fwd, loss_weight)
    return fwd.loss, grads, qgrads
