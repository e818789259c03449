"""Rectified-flow generator over VAE latent token sets.

The backbone is a transformer with mirrored encoder/decoder blocks: each
block runs gated linear self-attention, softmax cross-attention to the
condition tokens, and an MLP (pre-norm residuals throughout). Encoder block
outputs are concatenated into the mirrored decoder blocks and fused by a
linear layer. The timestep rides along as one extra token; the final head is
zero-initialized so a fresh model predicts a zero velocity field.

Training regresses the constant velocity x1 - x0 along linear
noise-to-data paths; sampling is plain Euler integration with an NFE
counter.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import cross_attention, init_attn_params, linear_attention
from .autodiff import Tensor
from .errors import DivergenceError
from .params import init_layer_norm, init_linear, init_vector, zero_grads
from .render import camera_preset, normal_map_descriptor, render_any, shaded_map
from .vae import _ln, _mlp

COND_KINDS = ("appearance", "normal")


@dataclass
class FlowConfig:
    enc_blocks: int = 4
    mid_blocks: int = 1
    dec_blocks: int = 4
    width: int = 128
    cond_dim: int = 64
    latent_dim: int = 16
    token_count: int = 32
    heads: int = 4
    steps_default: int = 50
    t_distribution: str = "uniform"
    cond_blocks: tuple = (8, 8)
    t_bands: int = 8

    def __post_init__(self):
        if self.dec_blocks != self.enc_blocks:
            raise ValueError("dec_blocks must equal enc_blocks (skip pairing)")
        if self.t_distribution != "uniform":
            raise ValueError(f"unsupported t distribution '{self.t_distribution}'")
        for name in ("enc_blocks", "mid_blocks", "width", "cond_dim", "latent_dim",
                     "token_count", "heads", "steps_default"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def paper_scale(cls, **overrides):
        base = cls(enc_blocks=10, mid_blocks=1, dec_blocks=10, width=512,
                   cond_dim=256, latent_dim=64, token_count=256)
        return replace(base, **overrides)

    @property
    def cond_tokens(self):
        return self.cond_blocks[0] * self.cond_blocks[1]


@dataclass
class ConditionInput:
    """One conditioning channel: typed tokens plus provenance."""

    kind: str
    tokens: Tensor  # (c, cond_dim) or (B, c, cond_dim)
    source: str = ""

    def __post_init__(self):
        if self.kind not in COND_KINDS:
            raise ValueError(f"condition kind must be one of {COND_KINDS}")


def interpolate(x0, x1, t):
    """Linear path point and its constant target velocity."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t={t} outside [0,1]")
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise ValueError("endpoint shapes differ")
    t = np.float32(t)
    return (1.0 - t) * x0 + t * x1, x1 - x0


def map_block_features(payload_map, blocks=(8, 8)):
    """Blockwise (mean payload, coverage) features of a rendered map."""
    bx, by = blocks
    h, w = payload_map.mask.shape
    if w % bx or h % by:
        raise ValueError(f"blocks {blocks} must divide resolution {(w, h)}")
    n = payload_map.normals.reshape(by, h // by, bx, w // bx, 3)
    m = payload_map.mask.reshape(by, h // by, bx, w // bx)
    mean_payload = n.mean(axis=(1, 3))
    cover = m.mean(axis=(1, 3))
    return np.concatenate([mean_payload, cover[..., None]], axis=-1).reshape(-1, 4)


def condition_features(source, kind, camera=None, blocks=(8, 8), render_kwargs=None):
    """Block features of a preset view of the source, by condition kind.

    `normal` conditions use the normal map itself; `appearance` uses a
    Lambert-shaded grey rendering as the textured-input stand-in. The source
    may be a shape/field/mesh (rendered here) or an existing NormalMap.
    """
    if kind not in COND_KINDS:
        raise ValueError(f"condition kind must be one of {COND_KINDS}")
    if hasattr(source, "normals") and hasattr(source, "mask"):
        nmap = source
    else:
        cam = camera or camera_preset("front")
        nmap = render_any(source, cam, **(render_kwargs or {}))
    if not nmap.mask.any():
        raise ValueError("condition render is empty")
    payload_map = shaded_map(nmap) if kind == "appearance" else nmap
    return map_block_features(payload_map, blocks)


class FlowModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        self.attn = {}
        self.nfe = 0
        rng = np.random.default_rng(seed)
        c = config
        w = c.width

        init_linear(self.params, "in", c.latent_dim, w, rng)
        init_linear(self.params, "t.fc1", 2 * c.t_bands, w, rng)
        init_linear(self.params, "t.fc2", w, w, rng)
        init_linear(self.params, "cond.proj", 4, c.cond_dim, rng)
        init_vector(self.params, "cond.type", (len(COND_KINDS), c.cond_dim), rng, std=0.5)

        names = [f"enc{i}" for i in range(c.enc_blocks)]
        names += [f"mid{i}" for i in range(c.mid_blocks)]
        names += [f"dec{i}" for i in range(c.dec_blocks)]
        self.block_names = names
        for name in names:
            self._add_block(name, rng)
        for i in range(c.dec_blocks):
            init_linear(self.params, f"fuse{i}", 2 * w, w, rng)
        init_layer_norm(self.params, "out_ln", w)
        init_linear(self.params, "head", w, c.latent_dim, rng, zero=True)

    def _add_block(self, prefix, rng):
        c = self.config
        w = c.width
        init_layer_norm(self.params, f"{prefix}.ln1", w)
        sa = init_attn_params(w, c.heads, "linear", rng, out_scale=0.5 / np.sqrt(w))
        self.attn[f"{prefix}.sa"] = sa
        self.params.update(sa.tensors(f"{prefix}.sa"))
        init_layer_norm(self.params, f"{prefix}.ln_c", w)
        ca = init_attn_params(w, c.heads, "softmax", rng, d_kv=c.cond_dim)
        self.attn[f"{prefix}.ca"] = ca
        self.params.update(ca.tensors(f"{prefix}.ca"))
        init_layer_norm(self.params, f"{prefix}.ln2", w)
        init_linear(self.params, f"{prefix}.mlp.fc1", w, 4 * w, rng)
        init_linear(self.params, f"{prefix}.mlp.fc2", 4 * w, w, rng)

    # ------------------------------------------------------------------
    # embeddings
    # ------------------------------------------------------------------

    def timestep_embed(self, t):
        """Sinusoidal features of t through a 2-layer MLP; one width-vector."""
        return self.timestep_embed_batch(np.array([t], dtype=np.float32))

    def timestep_embed_batch(self, ts):
        ts = np.asarray(ts, dtype=np.float32).reshape(-1, 1)
        freqs = (2.0 ** np.arange(self.config.t_bands)).astype(np.float32)[None, :]
        feats = np.concatenate([np.sin(ts * freqs), np.cos(ts * freqs)], axis=1)
        h = ad.silu(ad.add(ad.matmul(Tensor(feats), self.params["t.fc1.w"]),
                           self.params["t.fc1.b"]))
        return ad.add(ad.matmul(h, self.params["t.fc2.w"]), self.params["t.fc2.b"])

    def embed_condition(self, features, kind, source=""):
        """Project raw block features to typed condition tokens."""
        feats = np.asarray(features, dtype=np.float32)
        batched = feats.ndim == 3
        kinds = [kind] if isinstance(kind, str) else list(kind)
        type_idx = np.array([COND_KINDS.index(kd) for kd in kinds], dtype=np.int64)
        tok = ad.add(ad.matmul(Tensor(feats), self.params["cond.proj.w"]),
                     self.params["cond.proj.b"])
        type_emb = ad.gather_rows(self.params["cond.type"], type_idx)
        if batched:
            type_emb = ad.reshape(type_emb, (len(kinds), 1, self.config.cond_dim))
        else:
            type_emb = ad.reshape(type_emb, (1, self.config.cond_dim))
        tok = ad.add(tok, type_emb)
        return ConditionInput(kinds[0] if isinstance(kind, str) else "normal", tok, source)

    # ------------------------------------------------------------------
    # backbone
    # ------------------------------------------------------------------

    def _block(self, name, x, cond_tokens):
        p = self.params
        x = ad.add(x, linear_attention(_ln(p, f"{name}.ln1", x), self.attn[f"{name}.sa"]))
        if cond_tokens is not None:
            x = ad.add(
                x,
                cross_attention(_ln(p, f"{name}.ln_c", x), cond_tokens, self.attn[f"{name}.ca"]),
            )
        x = ad.add(x, _mlp(p, f"{name}.mlp", _ln(p, f"{name}.ln2", x)))
        return x

    def forward_batch(self, x_t, ts, cond_tokens=None, use_skips=True):
        """Velocity prediction for a (B,k,latent_dim) batch."""
        c = self.config
        xb = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, np.float32))
        b, k, _ = xb.shape
        x = ad.add(ad.matmul(xb, self.params["in.w"]), self.params["in.b"])
        temb = self.timestep_embed_batch(ts)
        temb = ad.reshape(temb, (b, 1, c.width))
        x = ad.concat([temb, x], axis=1)

        skips = []
        for i in range(c.enc_blocks):
            x = self._block(f"enc{i}", x, cond_tokens)
            skips.append(x)
        for i in range(c.mid_blocks):
            x = self._block(f"mid{i}", x, cond_tokens)
        for i in range(c.dec_blocks):
            skip = skips.pop()
            if not use_skips:
                skip = Tensor(np.zeros_like(skip.data))
            fused = ad.concat([x, skip], axis=-1)
            x = ad.add(ad.matmul(fused, self.params[f"fuse{i}.w"]), self.params[f"fuse{i}.b"])
            x = self._block(f"dec{i}", x, cond_tokens)
        x = ad.slice_axis(x, 1, 1, k + 1)  # drop the timestep token
        x = _ln(self.params, "out_ln", x)
        return ad.add(ad.matmul(x, self.params["head.w"]), self.params["head.b"])

    def dit_forward(self, x_t, t, cond=None, use_skips=True):
        """Single-sample forward: (k,latent_dim) -> velocity (k,latent_dim)."""
        tokens = None
        if cond is not None:
            tok = cond.tokens
            tokens = ad.reshape(tok, (1,) + tuple(tok.shape)) if tok.ndim == 2 else tok
        xb = np.asarray(x_t, dtype=np.float32)[None]
        out = self.forward_batch(xb, np.array([t], dtype=np.float32), tokens,
                                 use_skips=use_skips)
        return ad.reshape(out, out.shape[1:])

    # ------------------------------------------------------------------
    # training and sampling
    # ------------------------------------------------------------------

    def flow_loss(self, x1_batch, cond_tokens, rng):
        """Velocity-matching loss: mean per-token squared error norm."""
        x1 = np.asarray(x1_batch, dtype=np.float32)
        b, k, d = x1.shape
        x0 = rng.standard_normal(x1.shape).astype(np.float32)
        ts = rng.uniform(0.0, 1.0, size=b).astype(np.float32)
        x_t = (1.0 - ts)[:, None, None] * x0 + ts[:, None, None] * x1
        v_target = x1 - x0
        v_hat = self.forward_batch(x_t, ts, cond_tokens)
        diff = ad.sub(v_hat, Tensor(v_target))
        per_token = ad.tsum(ad.mul(diff, diff), axis=-1)
        return ad.mean(per_token)

    def train_step(self, optimizer, x1_batch, cond_feats=None, cond_kinds=None, rng=None):
        """One optimizer update; returns the scalar loss value."""
        rng = rng or np.random.default_rng(0)
        try:
            cond_tokens = None
            if cond_feats is not None:
                cond_tokens = self.embed_condition(cond_feats, cond_kinds).tokens
            loss = self.flow_loss(x1_batch, cond_tokens, rng)
            zero_grads(self.params)
            ad.backward(loss)
            optimizer.step()
            return float(loss.item())
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"flow step diverged: {exc}") from exc

    def euler_sample(self, cond, steps, x0):
        """Integrate x' = v(x,t) with fixed steps from the given noise."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        x = np.array(x0, dtype=np.float32)
        dt = np.float32(1.0 / steps)
        with ad.no_grad():
            for i in range(steps):
                v = self.dit_forward(x, i / steps, cond)
                x = x + dt * v.data
        self.nfe += steps
        if not np.all(np.isfinite(x)):
            raise DivergenceError("euler sampling produced non-finite state")
        return x

    def reset_nfe(self):
        self.nfe = 0
