"""Transformer-encoder classifier over community areas, forward and backward
written out by hand in float64 numpy.

Architecture: summed embeddings (pick-up, drop-off, battery bucket, linear
projection of the four cyclical time features) plus a fixed sinusoidal
position code, ``n_layers`` post-norm encoder layers (multi-head
self-attention with padding keys masked, ReLU feed-forward, residuals and
layer norms), and a linear head on the most recent token.
"""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, IncompatibleWeightsError, NumericError
from .bundle import WeightBundle
from .encoding import BATTERY, DROPOFF, PICKUP, TIME

LN_EPS = 1e-5
MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_communities: int = 77
    battery_buckets: int = 10
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    dropout: float = 0.0
    max_len: int = 32

    def __post_init__(self):
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.n_communities < 2:
            raise ConfigError("n_communities must be >= 2")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @classmethod
    def full_scale(cls, n_communities=77, battery_buckets=10, max_len=32):
        return cls(n_communities, battery_buckets, d_model=64, n_layers=6, n_heads=8,
                   d_ff=256, dropout=0.1, max_len=max_len)

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def sinusoidal_positions(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_norm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_back(dy, gamma, cache):
    xhat, inv = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    dbeta = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def _softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


class EncoderNet:
    """Stateless network: weights always arrive as a :class:`WeightBundle`."""

    def __init__(self, config):
        self.config = config
        self._layout = self._build_layout()
        self._fingerprint = WeightBundle.zeros(self._layout).fingerprint
        self._pos = sinusoidal_positions(config.max_len, config.d_model)

    def _build_layout(self):
        c = self.config
        d, f = c.d_model, c.d_ff
        layout = [("emb.pickup", (c.n_communities + 1, d)),
                  ("emb.dropoff", (c.n_communities + 1, d)),
                  ("emb.battery", (c.battery_buckets + 1, d)),
                  ("emb.time", (4, d))]
        for l in range(c.n_layers):
            p = f"enc{l}."
            layout += [(p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
                       (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
                       (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
                       (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
                       (p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,)),
                       (p + "ff.w1", (d, f)), (p + "ff.b1", (f,)),
                       (p + "ff.w2", (f, d)), (p + "ff.b2", (d,)),
                       (p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,))]
        layout += [("head.w", (d, c.n_communities)), ("head.b", (c.n_communities,))]
        return tuple(layout)

    @property
    def layout(self):
        return self._layout

    @property
    def fingerprint(self):
        return self._fingerprint

    def init_weights(self, seed):
        """Embeddings ~ N(0, 0.1^2), matrices Glorot-uniform, biases 0, norms (1, 0)."""
        rng = np.random.default_rng(seed)
        arrays = []
        for name, shape in self._layout:
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("emb."):
                a = rng.normal(0.0, 0.1, size=shape)
            elif leaf == "gamma":
                a = np.ones(shape)
            elif len(shape) == 2:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                a = rng.uniform(-lim, lim, size=shape)
            else:
                a = np.zeros(shape)
            arrays.append((name, a))
        return WeightBundle.from_arrays(arrays)

    def check(self, weights):
        if weights.fingerprint != self._fingerprint:
            raise IncompatibleWeightsError(
                f"weights fingerprint {weights.fingerprint:016x} does not match the model "
                f"configuration ({self._fingerprint:016x})")

    # -- forward -------------------------------------------------------------

    def forward(self, weights, X, training=False, rng=None, return_cache=False):
        """Logits of shape (batch, n_communities); column k is community k + 1."""
        self.check(weights)
        c = self.config
        X = np.asarray(X, dtype=np.float64)
        B, L, _ = X.shape
        if L > c.max_len:
            raise ConfigError(f"sequence length {L} exceeds max_len {c.max_len}")
        P = weights.arrays()
        H, dh = c.n_heads, c.d_head
        drop = c.dropout if training else 0.0
        if drop and rng is None:
            raise ConfigError("training with dropout needs an rng")

        pick = X[..., PICKUP].astype(np.int64)
        dropc = X[..., DROPOFF].astype(np.int64)
        batt = X[..., BATTERY].astype(np.int64)
        tfeat = X[..., TIME]
        valid = pick > 0
        key_bias = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]

        h = (P["emb.pickup"][pick] + P["emb.dropoff"][dropc] + P["emb.battery"][batt]
             + tfeat @ P["emb.time"] + self._pos[:L])
        _check_finite(h, "embedding")
        cache = {"idx": (pick, dropc, batt), "tfeat": tfeat, "layers": []}

        for l in range(c.n_layers):
            p = f"enc{l}."
            lc = {"x": h}
            q = (h @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (h @ P[p + "attn.wk"] + P[p + "attn.bk"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            v = (h @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + key_bias
            att = _softmax(scores)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, c.d_model)
            o = ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
            if drop:
                m1 = (rng.random(o.shape) >= drop) / (1.0 - drop)
                o = o * m1
                lc["m1"] = m1
            h1, ln1 = _layer_norm(h + o, P[p + "ln1.gamma"], P[p + "ln1.beta"])
            _check_finite(h1, p + "attn")
            z = h1 @ P[p + "ff.w1"] + P[p + "ff.b1"]
            r = np.maximum(z, 0.0)
            f = r @ P[p + "ff.w2"] + P[p + "ff.b2"]
            if drop:
                m2 = (rng.random(f.shape) >= drop) / (1.0 - drop)
                f = f * m2
                lc["m2"] = m2
            h2, ln2 = _layer_norm(h1 + f, P[p + "ln2.gamma"], P[p + "ln2.beta"])
            _check_finite(h2, p + "ff")
            lc.update(q=q, k=k, v=v, att=att, ctx=ctx, ln1=ln1, h1=h1, z=z, r=r, ln2=ln2)
            cache["layers"].append(lc)
            h = h2

        last = h[:, -1, :]
        logits = last @ P["head.w"] + P["head.b"]
        _check_finite(logits, "head")
        cache["last"] = last
        cache["shape"] = (B, L)
        if return_cache:
            return logits, cache
        return logits

    def attention_weights(self, weights, X):
        """Per-layer attention tensors (batch, heads, L, L), for inspection."""
        _, cache = self.forward(weights, X, return_cache=True)
        return [lc["att"] for lc in cache["layers"]]

    def predict_proba(self, weights, X):
        return _softmax(self.forward(weights, X))

    # -- backward ------------------------------------------------------------

    def backward(self, weights, cache, dlogits):
        """Gradient bundle for upstream gradient ``dlogits`` w.r.t. the logits."""
        c = self.config
        P = weights.arrays()
        G = WeightBundle.zeros(weights.layout)
        g = G.arrays()
        B, L = cache["shape"]
        H, dh, d = c.n_heads, c.d_head, c.d_model

        g["head.w"][...] = cache["last"].T @ dlogits
        g["head.b"][...] = dlogits.sum(0)
        dh_full = np.zeros((B, L, d))
        dh_full[:, -1, :] = dlogits @ P["head.w"].T

        for l in reversed(range(c.n_layers)):
            p = f"enc{l}."
            lc = cache["layers"][l]
            # feed-forward block
            dsum2, g[p + "ln2.gamma"][...], g[p + "ln2.beta"][...] = _layer_norm_back(
                dh_full, P[p + "ln2.gamma"], lc["ln2"])
            df = dsum2 * lc["m2"] if "m2" in lc else dsum2
            r2 = lc["r"].reshape(-1, c.d_ff)
            g[p + "ff.w2"][...] = r2.T @ df.reshape(-1, d)
            g[p + "ff.b2"][...] = df.reshape(-1, d).sum(0)
            dr = df @ P[p + "ff.w2"].T
            dz = dr * (lc["z"] > 0)
            g[p + "ff.w1"][...] = lc["h1"].reshape(-1, d).T @ dz.reshape(-1, c.d_ff)
            g[p + "ff.b1"][...] = dz.reshape(-1, c.d_ff).sum(0)
            dh1 = dsum2 + dz @ P[p + "ff.w1"].T
            # attention block
            dsum1, g[p + "ln1.gamma"][...], g[p + "ln1.beta"][...] = _layer_norm_back(
                dh1, P[p + "ln1.gamma"], lc["ln1"])
            do = dsum1 * lc["m1"] if "m1" in lc else dsum1
            g[p + "attn.wo"][...] = lc["ctx"].reshape(-1, d).T @ do.reshape(-1, d)
            g[p + "attn.bo"][...] = do.reshape(-1, d).sum(0)
            dctx = (do @ P[p + "attn.wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            att = lc["att"]
            datt = dctx @ lc["v"].transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dctx
            dscores = att * (datt - (datt * att).sum(-1, keepdims=True)) / np.sqrt(dh)
            dq = dscores @ lc["k"]
            dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]
            x2 = lc["x"].reshape(-1, d)
            dx = dsum1.copy()
            for name, dt in (("q", dq), ("k", dk), ("v", dv)):
                dflat = dt.transpose(0, 2, 1, 3).reshape(-1, d)
                g[p + f"attn.w{name}"][...] = x2.T @ dflat
                g[p + f"attn.b{name}"][...] = dflat.sum(0)
                dx += (dflat @ P[p + f"attn.w{name}"].T).reshape(B, L, d)
            dh_full = dx

        pick, dropc, batt = cache["idx"]
        flat = dh_full.reshape(-1, d)
        np.add.at(g["emb.pickup"], pick.ravel(), flat)
        np.add.at(g["emb.dropoff"], dropc.ravel(), flat)
        np.add.at(g["emb.battery"], batt.ravel(), flat)
        g["emb.time"][...] = cache["tfeat"].reshape(-1, 4).T @ flat
        return G

    def loss_and_grad(self, weights, X, y, training=False, rng=None):
        """Mean cross-entropy over the batch and its exact gradient."""
        y = np.asarray(y, dtype=np.int64)
        if y.size == 0:
            raise ConfigError("loss_and_grad needs a non-empty batch")
        logits, cache = self.forward(weights, X, training=training, rng=rng, return_cache=True)
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        idx = y - 1
        n = y.size
        loss = -logp[np.arange(n), idx].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), idx] -= 1.0
        dlogits /= n
        return float(loss), self.backward(weights, cache, dlogits)

    def loss(self, weights, X, y):
        logits = self.forward(weights, X)
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        y = np.asarray(y, dtype=np.int64)
        return float(-logp[np.arange(y.size), y - 1].mean())
