"""Transformer backbone for daily climate series -> phenophase dates.

Architecture: a linear per-day encoder, fixed sinusoidal positional
encodings added to the day embeddings (learnable species tokens get none),
two post-norm transformer encoder layers, and a linear decoder read off the
token positions. The second layer's normalizations are hybrid: standard
layer norm on source data, while running scalar statistics accumulate so
target data can later be normalized with the source constants instead of
its own per-vector statistics.

The discriminator is a 3-layer ReLU MLP over flattened token features; the
mid-feature variant embeds into a rank-loss space, the late-feature variant
emits one domain logit. An optional batch-norm over flattened late features
(before the decoder) supports statistic-only target adaptation.

Internally everything runs row-major (batch, position, width); the public
single-sample methods accept and return the (width, position) orientation
and are thin transposing wrappers.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor

MODES = ("source-train", "source-eval", "target-eval")


class UninitializedStatsError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    channels: int = 7
    seq_len: int = 365
    species: int = 5
    embed_dim: int = 64
    disc_dim: int = 128
    heads: int = 4
    ffn_dim: int = 128
    ln_momentum: float = 0.1

    def validate(self):
        dims = (self.channels, self.seq_len, self.species, self.embed_dim,
                self.disc_dim, self.heads, self.ffn_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"ModelConfig: all dims must be >= 1, got {self}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"ModelConfig: embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.ln_momentum <= 1.0:
            raise ValueError(f"ModelConfig: ln_momentum must be in (0, 1], got {self.ln_momentum}")
        return self


def positional_encodings(seq_len: int, width: int) -> np.ndarray:
    """Fixed sinusoidal table, shape (seq_len, width)."""
    pe = np.zeros((seq_len, width))
    pos = np.arange(seq_len)[:, None].astype(np.float64)
    idx = np.arange(0, width, 2).astype(np.float64)
    angles = pos / np.power(10000.0, idx / width)[None, :]
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)[:, : width // 2]
    return pe


def _name_rng(seed: int, name: str) -> np.random.Generator:
    # derive per-parameter streams from (seed, name) so two model variants
    # sharing a parameter name get bitwise-identical initial values
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Standard layer norm over the last axis, composed from primitive ops."""
    shape = x.data.shape
    mu = tc.tmean(x, axis=-1, keepdims=True)
    xc = tc.sub(x, tc.broadcast_to(mu, shape))
    var = tc.tmean(tc.mul(xc, xc), axis=-1, keepdims=True)
    sd = tc.sqrt(tc.add(var, 1e-12))
    xn = tc.div(xc, tc.broadcast_to(sd, shape))
    return tc.add(tc.mul(xn, gamma), beta)


class LayerNorm:
    def __init__(self, width: int, prefix: str, seed: int):
        self.gamma = Tensor(np.ones(width), requires_grad=True, name=f"{prefix}.gamma")
        self.beta = Tensor(np.zeros(width), requires_grad=True, name=f"{prefix}.beta")

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def params(self):
        return [self.gamma, self.beta]


class HybridLayerNorm(LayerNorm):
    """Layer norm that doubles as a recorder of source population statistics.

    source-train: standard LN on the input, then EMA-update the running
    scalars from the batch (per-vector mean and std averaged over batch and
    positions). Stats are written, never read, on the source path.
    source-eval: standard LN, no update.
    target-eval: normalize with the stored (mu_s, sigma_s) instead of the
    per-vector statistics; errors if no source batch was ever seen.
    """

    def __init__(self, width: int, prefix: str, seed: int, momentum: float):
        super().__init__(width, prefix, seed)
        self.momentum = momentum
        self.mu_s = 0.0
        self.sigma_s = 0.0
        self.initialized = False

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if mode == "source-train":
            out = layer_norm(x, self.gamma, self.beta)
            self.update(x.data)
            return out
        if mode == "source-eval":
            return layer_norm(x, self.gamma, self.beta)
        if mode == "target-eval":
            if not self.initialized:
                raise UninitializedStatsError(
                    "uninitialized running statistics: target-eval before any source batch")
            xn = tc.div(tc.sub(x, self.mu_s), self.sigma_s)
            return tc.add(tc.mul(xn, self.gamma), self.beta)
        raise ValueError(f"unknown mode {mode!r}")

    def update(self, batch: np.ndarray):
        m = self.momentum
        self.mu_s = (1.0 - m) * self.mu_s + m * float(batch.mean(axis=-1).mean())
        self.sigma_s = (1.0 - m) * self.sigma_s + m * float(batch.std(axis=-1).mean())
        self.initialized = True


class BatchNormFlat:
    """Batch norm over flattened late features, with statistic-only adaptation."""

    def __init__(self, width: int, prefix: str, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(width), requires_grad=True, name=f"{prefix}.gamma")
        self.beta = Tensor(np.zeros(width), requires_grad=True, name=f"{prefix}.beta")
        self.momentum = momentum
        self.run_mean = np.zeros(width)
        self.run_var = np.ones(width)
        self.initialized = False
        self.eps = 1e-8

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if mode == "source-train":
            mu = tc.tmean(x, axis=0, keepdims=True)
            xc = tc.sub(x, tc.broadcast_to(mu, x.data.shape))
            var = tc.tmean(tc.mul(xc, xc), axis=0, keepdims=True)
            sd = tc.sqrt(tc.add(var, self.eps))
            xn = tc.div(xc, tc.broadcast_to(sd, x.data.shape))
            m = self.momentum
            if not self.initialized:
                self.run_mean = x.data.mean(axis=0)
                self.run_var = x.data.var(axis=0)
                self.initialized = True
            else:
                self.run_mean = (1 - m) * self.run_mean + m * x.data.mean(axis=0)
                self.run_var = (1 - m) * self.run_var + m * x.data.var(axis=0)
        else:
            xn = tc.div(tc.sub(x, Tensor(self.run_mean)),
                        Tensor(np.sqrt(self.run_var + self.eps)))
        return tc.add(tc.mul(xn, self.gamma), self.beta)

    def adapt(self, pool: np.ndarray):
        """Replace running stats with the pool's; learnable params untouched."""
        self.run_mean = pool.mean(axis=0)
        self.run_var = pool.var(axis=0)
        self.initialized = True

    def params(self):
        return [self.gamma, self.beta]


class MultiHeadAttention:
    def __init__(self, width: int, heads: int, prefix: str, seed: int):
        self.width = width
        self.heads = heads
        self.dk = width // heads
        scale = 1.0 / np.sqrt(width)
        self.w = {}
        self.b = {}
        for part in ("q", "k", "v", "o"):
            name = f"{prefix}.w{part}"
            self.w[part] = Tensor(_name_rng(seed, name).normal(0.0, scale, (width, width)),
                                  requires_grad=True, name=name)
            self.b[part] = Tensor(np.zeros(width), requires_grad=True, name=f"{prefix}.b{part}")

    def _heads(self, t: Tensor, batch: int, length: int) -> Tensor:
        t = tc.reshape(t, (batch, length, self.heads, self.dk))
        t = tc.swapaxes(t, 1, 2)
        return tc.reshape(t, (batch * self.heads, length, self.dk))

    def forward(self, x_kv: Tensor, x_q: Tensor) -> Tensor:
        bsz, plen, _ = x_kv.data.shape
        qlen = x_q.data.shape[1]
        q = tc.add(tc.matmul(x_q, self.w["q"]), self.b["q"])
        k = tc.add(tc.matmul(x_kv, self.w["k"]), self.b["k"])
        v = tc.add(tc.matmul(x_kv, self.w["v"]), self.b["v"])
        qh = self._heads(q, bsz, qlen)
        kh = self._heads(k, bsz, plen)
        vh = self._heads(v, bsz, plen)
        scores = tc.mul(tc.matmul(qh, tc.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(self.dk))
        attn = tc.softmax(scores, axis=-1)
        ctx = tc.matmul(attn, vh)
        ctx = tc.reshape(ctx, (bsz, self.heads, qlen, self.dk))
        ctx = tc.reshape(tc.swapaxes(ctx, 1, 2), (bsz, qlen, self.width))
        return tc.add(tc.matmul(ctx, self.w["o"]), self.b["o"])

    def params(self):
        return [self.w[p] for p in "qkvo"] + [self.b[p] for p in "qkvo"]


class FeedForward:
    def __init__(self, width: int, hidden: int, prefix: str, seed: int):
        n1, n2 = f"{prefix}.w1", f"{prefix}.w2"
        self.w1 = Tensor(_name_rng(seed, n1).normal(0.0, 1.0 / np.sqrt(width), (width, hidden)),
                         requires_grad=True, name=n1)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name=f"{prefix}.b1")
        self.w2 = Tensor(_name_rng(seed, n2).normal(0.0, 1.0 / np.sqrt(hidden), (hidden, width)),
                         requires_grad=True, name=n2)
        self.b2 = Tensor(np.zeros(width), requires_grad=True, name=f"{prefix}.b2")

    def forward(self, x: Tensor) -> Tensor:
        h = tc.relu(tc.add(tc.matmul(x, self.w1), self.b1))
        return tc.add(tc.matmul(h, self.w2), self.b2)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


class TransformerLayer:
    """Post-norm encoder layer; queries may be restricted to a position range."""

    def __init__(self, cfg: ModelConfig, prefix: str, seed: int, hybrid: bool):
        d = cfg.embed_dim
        self.attn = MultiHeadAttention(d, cfg.heads, f"{prefix}.attn", seed)
        self.ffn = FeedForward(d, cfg.ffn_dim, f"{prefix}.ffn", seed)
        ln = HybridLayerNorm if hybrid else LayerNorm
        kwargs = {"momentum": cfg.ln_momentum} if hybrid else {}
        self.ln1 = ln(d, f"{prefix}.ln1", seed, **kwargs)
        self.ln2 = ln(d, f"{prefix}.ln2", seed, **kwargs)

    def forward(self, x: Tensor, mode: str, query_range=None) -> Tensor:
        if query_range is not None:
            xq = tc.narrow(x, 1, query_range[0], query_range[1])
        else:
            xq = x
        h = self.ln1.forward(tc.add(xq, self.attn.forward(x, xq)), mode)
        return self.ln2.forward(tc.add(h, self.ffn.forward(h)), mode)

    def params(self):
        return self.attn.params() + self.ffn.params() + self.ln1.params() + self.ln2.params()


class Discriminator:
    """3-layer ReLU MLP over flattened token features."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, prefix: str, seed: int):
        self.layers = []
        dims = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)]
        for i, (a, b) in enumerate(dims, start=1):
            wn = f"{prefix}.w{i}"
            w = Tensor(_name_rng(seed, wn).normal(0.0, 1.0 / np.sqrt(a), (a, b)),
                       requires_grad=True, name=wn)
            bias = Tensor(np.zeros(b), requires_grad=True, name=f"{prefix}.b{i}")
            self.layers.append((w, bias))

    def forward(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = tc.add(tc.matmul(x, w), b)
            if i < len(self.layers) - 1:
                x = tc.relu(x)
        return x

    def params(self):
        return [t for pair in self.layers for t in pair]


@dataclass
class Standardizer:
    """Input-channel and label standardization constants from the train split."""

    chan_mean: np.ndarray
    chan_std: np.ndarray
    y_mean: float
    y_std: float

    def apply_x(self, x: np.ndarray) -> np.ndarray:
        # x is (..., C, T); broadcasting over the day axis
        return (x - self.chan_mean[:, None]) / self.chan_std[:, None]

    def apply_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def invert_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean


class PhenoFormer:
    """Backbone + optional discriminator / batch-norm, by method variant.

    hln_sites: "none" (all standard LN), "t2" (both t2 sites hybrid, the
    default architecture), or "all" (every LN site hybrid).
    disc_site: None, "mid" (flattened first-layer token features -> embedding
    of width disc_dim), or "late" (flattened second-layer token features ->
    single domain logit).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, hln_sites: str = "t2",
                 disc_site: str | None = None, adabn: bool = False,
                 per_species_decoder: bool = False):
        cfg.validate()
        if hln_sites not in ("none", "t2", "all"):
            raise ValueError(f"hln_sites must be none|t2|all, got {hln_sites!r}")
        if disc_site not in (None, "mid", "late"):
            raise ValueError(f"disc_site must be None|mid|late, got {disc_site!r}")
        self.cfg = cfg
        self.seed = seed
        self.hln_sites = hln_sites
        self.disc_site = disc_site
        self.adabn = adabn
        self.per_species_decoder = per_species_decoder

        c, t, s, d = cfg.channels, cfg.seq_len, cfg.species, cfg.embed_dim
        self.enc_w = Tensor(_name_rng(seed, "encoder.w").normal(0.0, 1.0 / np.sqrt(c), (c, d)),
                            requires_grad=True, name="encoder.w")
        self.enc_b = Tensor(np.zeros(d), requires_grad=True, name="encoder.b")
        self.tokens = Tensor(_name_rng(seed, "tokens").normal(0.0, 1.0 / np.sqrt(d), (s, d)),
                             requires_grad=True, name="tokens")
        self.pos = Tensor(positional_encodings(t, d))
        self.t1 = TransformerLayer(cfg, "t1", seed, hybrid=(hln_sites == "all"))
        self.t2 = TransformerLayer(cfg, "t2", seed, hybrid=(hln_sites in ("t2", "all")))
        if per_species_decoder:
            self.dec_w = Tensor(_name_rng(seed, "decoder.w").normal(0.0, 1.0 / np.sqrt(d), (s, d)),
                                requires_grad=True, name="decoder.w")
            self.dec_b = Tensor(np.zeros(s), requires_grad=True, name="decoder.b")
        else:
            self.dec_w = Tensor(_name_rng(seed, "decoder.w").normal(0.0, 1.0 / np.sqrt(d), (d,)),
                                requires_grad=True, name="decoder.w")
            self.dec_b = Tensor(np.zeros(()), requires_grad=True, name="decoder.b")
        if disc_site == "mid":
            self.disc = Discriminator(d * s, cfg.disc_dim, cfg.disc_dim, "disc", seed)
        elif disc_site == "late":
            self.disc = Discriminator(d * s, cfg.disc_dim, 1, "disc", seed)
        else:
            self.disc = None
        self.bn = BatchNormFlat(d * s, "bn") if adabn else None
        self.standardizer: Standardizer | None = None

    # -- parameter plumbing -------------------------------------------------

    def params(self) -> dict:
        out = [self.enc_w, self.enc_b, self.tokens,
               *self.t1.params(), *self.t2.params(), self.dec_w, self.dec_b]
        if self.disc is not None:
            out.extend(self.disc.params())
        if self.bn is not None:
            out.extend(self.bn.params())
        return {p.name: p for p in out}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params().values())

    # -- internal row-major pipeline ----------------------------------------

    def _encode_rows(self, rows: Tensor) -> Tensor:
        return tc.add(tc.matmul(rows, self.enc_w), self.enc_b)

    def _t1_rows(self, e_rows: Tensor, mode: str) -> Tensor:
        bsz = e_rows.data.shape[0]
        s, d = self.cfg.species, self.cfg.embed_dim
        x = tc.add(e_rows, self.pos)
        tok = tc.broadcast_to(tc.reshape(self.tokens, (1, s, d)), (bsz, s, d))
        seq = tc.concat([x, tok], axis=1)
        return self.t1.forward(seq, mode)

    def _t2_rows(self, full1: Tensor, mode: str) -> Tensor:
        t, s = self.cfg.seq_len, self.cfg.species
        return self.t2.forward(full1, mode, query_range=(t, t + s))

    def _decode_rows(self, g_rows: Tensor) -> Tensor:
        # (B,S,D)*(D,) or (B,S,D)*(S,D), summed over width
        return tc.add(tc.tsum(tc.mul(g_rows, self.dec_w), axis=2), self.dec_b)

    def _disc_rows(self, feat_rows: Tensor) -> Tensor:
        bsz = feat_rows.data.shape[0]
        flat = tc.reshape(feat_rows, (bsz, feat_rows.data.shape[1] * feat_rows.data.shape[2]))
        return self.disc.forward(flat)

    def forward_core(self, rows: np.ndarray, mode: str, bn_mode: str | None = None):
        """Full pipeline on a standardized (B, T, C) batch.

        Returns (pred, z_rows, g_rows) with pred in standardized label units.
        bn_mode overrides the batch-norm mode ("bypass" skips it, for the
        adaptation pass); by default it follows `mode`.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        t, s = self.cfg.seq_len, self.cfg.species
        full1 = self._t1_rows(self._encode_rows(Tensor(rows)), mode)
        z_rows = tc.narrow(full1, 1, t, t + s)
        g_rows = self._t2_rows(full1, mode)
        if self.bn is not None and bn_mode != "bypass":
            bsz = g_rows.data.shape[0]
            flat = tc.reshape(g_rows, (bsz, s * self.cfg.embed_dim))
            flat = self.bn.forward(flat, bn_mode or mode)
            g_dec = tc.reshape(flat, (bsz, s, self.cfg.embed_dim))
        else:
            g_dec = g_rows
        return self._decode_rows(g_dec), z_rows, g_rows

    # -- public, contract-oriented views ((width, position) orientation) ----

    @staticmethod
    def _to_batched_rows(x, name) -> tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if t.data.ndim == 2:
            single = True
            t = tc.reshape(t, (1,) + t.data.shape)
        elif t.data.ndim == 3:
            single = False
        else:
            raise tc.ShapeError(name, t.data.shape)
        return tc.swapaxes(t, 1, 2), single

    @staticmethod
    def _from_rows(rows: Tensor, single: bool) -> Tensor:
        out = tc.swapaxes(rows, 1, 2)
        if single:
            out = tc.reshape(out, out.data.shape[1:])
        return out

    def encode(self, x):
        """(C,T) or (B,C,T) series -> (D,T) / (B,D,T) day embeddings."""
        rows, single = self._to_batched_rows(x, "encode")
        if rows.data.shape[2] != self.cfg.channels:
            raise tc.ShapeError("encode", rows.data.shape[::-1])
        return self._from_rows(self._encode_rows(rows), single)

    def forward_t1(self, e, mode: str = "source-eval"):
        """Day embeddings -> (H, Z): series part and token part after layer 1."""
        rows, single = self._to_batched_rows(e, "forward_t1")
        full1 = self._t1_rows(rows, mode)
        t, s = self.cfg.seq_len, self.cfg.species
        h = self._from_rows(tc.narrow(full1, 1, 0, t), single)
        z = self._from_rows(tc.narrow(full1, 1, t, t + s), single)
        return h, z

    def forward_t2(self, h, z, mode: str):
        """(H, Z) -> G, the second-layer token features."""
        h_rows, single = self._to_batched_rows(h, "forward_t2")
        z_rows, _ = self._to_batched_rows(z, "forward_t2")
        full1 = tc.concat([h_rows, z_rows], axis=1)
        return self._from_rows(self._t2_rows(full1, mode), single)

    def decode(self, g):
        """Token features G -> one date per species (pure affine read-out)."""
        g_rows, single = self._to_batched_rows(g, "decode")
        out = self._decode_rows(g_rows)
        if single:
            out = tc.reshape(out, (self.cfg.species,))
        return out

    def discriminate(self, z):
        """Token features -> discriminator output (embedding or logit)."""
        if self.disc is None:
            raise ValueError("model has no discriminator")
        z_rows, single = self._to_batched_rows(z, "discriminate")
        out = self._disc_rows(z_rows)
        if single:
            out = tc.reshape(out, (out.data.shape[1],))
        return out

    # -- inference ------------------------------------------------------------

    def predict(self, x: np.ndarray, mode: str = "source-eval",
                batch: int = 64) -> np.ndarray:
        """Raw (N,C,T) series -> (N,S) day-of-year predictions, graph-free."""
        x = np.asarray(x, dtype=np.float64)
        if self.standardizer is not None:
            x = self.standardizer.apply_x(x)
        rows = np.ascontiguousarray(x.transpose(0, 2, 1))
        preds = []
        for i in range(0, rows.shape[0], batch):
            pred, _, _ = self.forward_core(rows[i:i + batch], mode)
            preds.append(pred.data)
        out = np.concatenate(preds, axis=0)
        if self.standardizer is not None:
            out = self.standardizer.invert_y(out)
        return out

    def adapt_norm_stats(self, x: np.ndarray, batch: int = 64):
        """Statistic-only adaptation pass over unlabeled inputs (batch-norm models)."""
        if self.bn is None:
            raise ValueError("adapt_norm_stats requires the batch-norm variant")
        x = np.asarray(x, dtype=np.float64)
        if self.standardizer is not None:
            x = self.standardizer.apply_x(x)
        rows = np.ascontiguousarray(x.transpose(0, 2, 1))
        pools = []
        s, d = self.cfg.species, self.cfg.embed_dim
        for i in range(0, rows.shape[0], batch):
            _, _, g_rows = self.forward_core(rows[i:i + batch], "source-eval", bn_mode="bypass")
            pools.append(g_rows.data.reshape(-1, s * d))
        self.bn.adapt(np.concatenate(pools, axis=0))

    # -- checkpointing --------------------------------------------------------

    def _hybrid_sites(self):
        sites = []
        for lname, layer in (("t1", self.t1), ("t2", self.t2)):
            for sub in ("ln1", "ln2"):
                ln = getattr(layer, sub)
                if isinstance(ln, HybridLayerNorm):
                    sites.append((f"{lname}.{sub}", ln))
        return sites

    def save(self, path):
        arrays = {f"param/{name}": p.data for name, p in self.params().items()}
        for name, ln in self._hybrid_sites():
            arrays[f"hln/{name}"] = np.array([ln.mu_s, ln.sigma_s, float(ln.initialized)])
        if self.bn is not None:
            arrays["bn/run_mean"] = self.bn.run_mean
            arrays["bn/run_var"] = self.bn.run_var
            arrays["bn/flag"] = np.array([float(self.bn.initialized)])
        if self.standardizer is not None:
            arrays["std/chan_mean"] = self.standardizer.chan_mean
            arrays["std/chan_std"] = self.standardizer.chan_std
            arrays["std/y"] = np.array([self.standardizer.y_mean, self.standardizer.y_std])
        meta = {"config": asdict(self.cfg), "seed": self.seed,
                "hln_sites": self.hln_sites, "disc_site": self.disc_site,
                "adabn": self.adabn, "per_species_decoder": self.per_species_decoder}
        arrays["meta"] = np.array(json.dumps(meta))
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "PhenoFormer":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            model = cls(ModelConfig(**meta["config"]), seed=meta["seed"],
                        hln_sites=meta["hln_sites"], disc_site=meta["disc_site"],
                        adabn=meta["adabn"], per_species_decoder=meta["per_species_decoder"])
            params = model.params()
            for key in z.files:
                if key.startswith("param/"):
                    params[key[len("param/"):]].data[...] = z[key]
            for name, ln in model._hybrid_sites():
                mu, sigma, flag = z[f"hln/{name}"]
                ln.mu_s, ln.sigma_s, ln.initialized = float(mu), float(sigma), bool(flag)
            if model.bn is not None:
                model.bn.run_mean = z["bn/run_mean"].copy()
                model.bn.run_var = z["bn/run_var"].copy()
                model.bn.initialized = bool(z["bn/flag"][0])
            if "std/y" in z.files:
                y = z["std/y"]
                model.standardizer = Standardizer(z["std/chan_mean"].copy(),
                                                  z["std/chan_std"].copy(),
                                                  float(y[0]), float(y[1]))
        return model


def param_count(cfg: ModelConfig, disc_site: str | None = None, adabn: bool = False,
                per_species_decoder: bool = False) -> int:
    """Closed-form learnable parameter count for a model variant."""
    c, t, s, d = cfg.channels, cfg.seq_len, cfg.species, cfg.embed_dim
    f, h = cfg.disc_dim, cfg.ffn_dim
    enc = c * d + d
    tokens = s * d
    per_layer = 4 * d * d + 4 * d + (d * h + h + h * d + d) + 2 * (2 * d)
    dec = (s * d + s) if per_species_decoder else (d + 1)
    total = enc + tokens + 2 * per_layer + dec
    if disc_site == "mid":
        total += (d * s) * f + f + f * f + f + f * f + f
    elif disc_site == "late":
        total += (d * s) * f + f + f * f + f + f * 1 + 1
    if adabn:
        total += 2 * (d * s)
    return total
