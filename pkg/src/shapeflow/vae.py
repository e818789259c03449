"""Set-latent VAE over implicit fields.

Encoding: a surface cloud is downsampled by FPS to k anchor points whose
embeddings cross-attend to the full cloud, pass through self-attention
blocks, and land on mean/log-variance heads — an unordered set of latent
tokens. Decoding: tokens are up-projected, refined by self-attention, and
queried pointwise by cross-attention from embedded spatial coordinates,
yielding one logit per query.

Supervision variants share the architecture and differ only in the loss and
field convention:

* ``tsdf_bce`` — sigmoid(logit) matches the truncated-SDF label in [0,1];
* ``sdf_mse``  — the logit regresses clip(y,-d,d)/d directly;
* ``occ_bce``  — sigmoid(logit) matches binary occupancy (1 inside).

Normals are the normalized gradient of the logit w.r.t. the query, obtained
by reverse-mode differentiation; the gradient stays on the tape so the
normal loss trains the decoder.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import attention_block, cross_attention, init_attn_params
from .autodiff import Tensor
from .geometry.labels import occupancy_label, tsdf_label
from .geometry.mesh import evaluate_on_grid, grid_coords, marching_cubes
from .geometry.sampling import SurfaceCloud, farthest_point_sampling, sample_surface
from .params import init_layer_norm, init_linear
from .render import GridField

SUPERVISION_KINDS = ("tsdf_bce", "sdf_mse", "occ_bce")


@dataclass
class VaeConfig:
    enc_layers: int = 4
    dec_layers: int = 6
    enc_width: int = 128
    dec_width: int = 256
    latent_dim: int = 16
    token_count: int = 64
    max_tokens: int = 512
    posemb_bands: int = 6
    delta: float = 0.05
    lambda_bce: float = 1.0
    lambda_normal: float = 0.1
    kl_weight: float = 1e-6
    heads: int = 4
    supervision: str = "tsdf_bce"
    self_attn: str = "softmax"

    def __post_init__(self):
        if self.supervision not in SUPERVISION_KINDS:
            raise ValueError(f"unknown supervision '{self.supervision}'")
        if self.self_attn not in ("softmax", "linear"):
            raise ValueError(f"unknown self_attn '{self.self_attn}'")
        for name in ("enc_layers", "dec_layers", "enc_width", "dec_width",
                     "latent_dim", "token_count", "posemb_bands", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def paper_scale(cls, **overrides):
        """Full-size architecture, for shape checks only."""
        base = cls(enc_layers=8, dec_layers=16, enc_width=512, dec_width=1024,
                   latent_dim=64, token_count=4096, max_tokens=65536)
        return replace(base, **overrides)


@dataclass
class LatentSet:
    """Token-wise posterior parameters from one encode pass."""

    mean: Tensor  # (k, latent_dim)
    logvar: Tensor  # (k, latent_dim)
    fps_idx: np.ndarray = None

    @property
    def token_count(self):
        return self.mean.shape[0]


def pos_features(coords, bands):
    """Raw coords plus per-axis sin/cos at octave frequencies (taped)."""
    q = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, np.float32))
    feats = [q]
    for j in range(bands):
        f = float(2**j * np.pi)
        scaled = ad.mul(q, f)
        feats.append(ad.sin(scaled))
        feats.append(ad.cos(scaled))
    return ad.concat(feats, axis=-1)


def posemb_dim(bands):
    return 3 + 6 * bands


def _mlp(params, prefix, x):
    h = ad.silu(ad.add(ad.matmul(x, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def _ln(params, prefix, x):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


class VecSetVAE:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        self.attn = {}
        rng = np.random.default_rng(seed)
        c = config
        pe = posemb_dim(c.posemb_bands)

        init_linear(self.params, "enc.pos", pe, c.enc_width, rng)
        init_linear(self.params, "enc.nrm", 3, c.enc_width, rng, bias=False)
        self._add_cross("enc.cross", c.enc_width, c.enc_width, c.heads, rng, mlp=True)
        for i in range(c.enc_layers):
            self._add_block(f"enc.b{i}", c.enc_width, c.heads, rng, variant=c.self_attn)
        init_layer_norm(self.params, "enc.out_ln", c.enc_width)
        init_linear(self.params, "enc.mean", c.enc_width, c.latent_dim, rng)
        init_linear(self.params, "enc.logvar", c.enc_width, c.latent_dim, rng, scale=0.01)
        # start near-deterministic so early reconstruction is not drowned in noise
        self.params["enc.logvar.b"].data[:] = -3.0

        init_linear(self.params, "dec.up", c.latent_dim, c.dec_width, rng)
        for j in range(c.dec_layers):
            self._add_block(f"dec.b{j}", c.dec_width, c.heads, rng, variant=c.self_attn)
        init_layer_norm(self.params, "dec.out_ln", c.dec_width)
        init_linear(self.params, "dec.pos", pe, c.dec_width, rng)
        init_layer_norm(self.params, "dec.q_ln", c.dec_width)
        self._add_attn("dec.cross", c.dec_width, c.heads, rng, variant="softmax")
        init_layer_norm(self.params, "dec.head_ln", c.dec_width)
        init_linear(self.params, "dec.head1", c.dec_width, c.dec_width // 2, rng)
        init_linear(self.params, "dec.head2", c.dec_width // 2, 1, rng)

    def _add_attn(self, prefix, width, heads, rng, variant, d_kv=None):
        p = init_attn_params(width, heads, variant, rng, d_kv=d_kv)
        self.attn[prefix] = p
        self.params.update(p.tensors(prefix))

    def _add_block(self, prefix, width, heads, rng, variant):
        init_layer_norm(self.params, f"{prefix}.ln1", width)
        self._add_attn(f"{prefix}.attn", width, heads, rng, variant)
        init_layer_norm(self.params, f"{prefix}.ln2", width)
        init_linear(self.params, f"{prefix}.mlp.fc1", width, 4 * width, rng)
        init_linear(self.params, f"{prefix}.mlp.fc2", 4 * width, width, rng)

    def _add_cross(self, prefix, width, kv_width, heads, rng, mlp=False):
        init_layer_norm(self.params, f"{prefix}.ln_q", width)
        init_layer_norm(self.params, f"{prefix}.ln_kv", kv_width)
        self._add_attn(f"{prefix}.attn", width, heads, rng, "softmax", d_kv=kv_width)
        if mlp:
            init_layer_norm(self.params, f"{prefix}.ln2", width)
            init_linear(self.params, f"{prefix}.mlp.fc1", width, 4 * width, rng)
            init_linear(self.params, f"{prefix}.mlp.fc2", 4 * width, width, rng)

    def _token_block(self, prefix, x):
        h = _ln(self.params, f"{prefix}.ln1", x)
        x = ad.add(x, attention_block(h, self.attn[f"{prefix}.attn"]))
        h = _ln(self.params, f"{prefix}.ln2", x)
        return ad.add(x, _mlp(self.params, f"{prefix}.mlp", h))

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def embed_points(self, points, normals=None):
        feats = pos_features(points, self.config.posemb_bands)
        emb = ad.add(ad.matmul(feats, self.params["enc.pos.w"]), self.params["enc.pos.b"])
        if normals is not None:
            nrm = normals if isinstance(normals, Tensor) else Tensor(np.asarray(normals, np.float32))
            emb = ad.add(emb, ad.matmul(nrm, self.params["enc.nrm.w"]))
        return emb

    def encode(self, cloud, k=None, seed=0, fps_start=None):
        """FPS anchors cross-attend to the full cloud; heads give mean/logvar."""
        k = k or self.config.token_count
        pts = cloud.points if isinstance(cloud, SurfaceCloud) else np.asarray(cloud)
        normals = cloud.normals if isinstance(cloud, SurfaceCloud) else None
        n = len(pts)
        if k > n:
            raise ValueError(f"token count {k} exceeds input points {n}")
        if fps_start is None:
            fps_start = int(np.random.default_rng(seed).integers(n))
        idx = farthest_point_sampling(pts, k, fps_start)

        emb_x = self.embed_points(pts, normals)
        emb_q = ad.gather_rows(emb_x, idx)
        qn = _ln(self.params, "enc.cross.ln_q", emb_q)
        kn = _ln(self.params, "enc.cross.ln_kv", emb_x)
        z = ad.add(emb_q, cross_attention(qn, kn, self.attn["enc.cross.attn"]))
        z = ad.add(z, _mlp(self.params, "enc.cross.mlp", _ln(self.params, "enc.cross.ln2", z)))
        for i in range(self.config.enc_layers):
            z = self._token_block(f"enc.b{i}", z)
        z = _ln(self.params, "enc.out_ln", z)
        mean = ad.add(ad.matmul(z, self.params["enc.mean.w"]), self.params["enc.mean.b"])
        logvar = ad.add(ad.matmul(z, self.params["enc.logvar.w"]), self.params["enc.logvar.b"])
        return LatentSet(mean, logvar, idx)

    def reparameterize(self, latent, seed=0):
        """mean + exp(logvar/2) * eps with a seeded standard-normal draw."""
        eps = np.random.default_rng(seed).standard_normal(latent.mean.shape).astype(np.float32)
        std = ad.exp(ad.mul(latent.logvar, 0.5))
        return ad.add(latent.mean, ad.mul(std, Tensor(eps)))

    # ------------------------------------------------------------------
    # decoder
    # ------------------------------------------------------------------

    def decode_tokens(self, z):
        x = ad.add(ad.matmul(z, self.params["dec.up.w"]), self.params["dec.up.b"])
        for j in range(self.config.dec_layers):
            x = self._token_block(f"dec.b{j}", x)
        return _ln(self.params, "dec.out_ln", x)

    def query_tokens(self, tokens, queries):
        """Pointwise logits for queries against a decoded token set."""
        q = queries if isinstance(queries, Tensor) else Tensor(np.asarray(queries, np.float32))
        feats = pos_features(q, self.config.posemb_bands)
        emb = ad.add(ad.matmul(feats, self.params["dec.pos.w"]), self.params["dec.pos.b"])
        qn = _ln(self.params, "dec.q_ln", emb)
        h = ad.add(emb, cross_attention(qn, tokens, self.attn["dec.cross"]))
        h = _ln(self.params, "dec.head_ln", h)
        h = ad.silu(ad.add(ad.matmul(h, self.params["dec.head1.w"]), self.params["dec.head1.b"]))
        # row reduction instead of a gemv: keeps per-query logits bitwise
        # independent of batch composition
        w2 = ad.reshape(self.params["dec.head2.w"], (self.params["dec.head2.w"].shape[0],))
        out = ad.add(ad.tsum(ad.mul(h, w2), axis=1), self.params["dec.head2.b"])
        return out

    def decode_query(self, z, queries):
        return self.query_tokens(self.decode_tokens(z), queries)

    def decode_grid(self, z, res, chunk=16384):
        """Logit lattice over [-1,1]^3 (no tape)."""
        with ad.no_grad():
            tokens = self.decode_tokens(z)
            out = np.empty(res**3, dtype=np.float32)
            lin = grid_coords(res)
            x, y, zz = np.meshgrid(lin, lin, lin, indexing="ij")
            pts = np.stack([x.ravel(), y.ravel(), zz.ravel()], axis=1).astype(np.float32)
            for s in range(0, len(pts), chunk):
                out[s : s + chunk] = self.query_tokens(tokens, pts[s : s + chunk]).data
        return out.reshape(res, res, res)

    def predicted_normal(self, z, queries, create_graph=False, tokens=None):
        """Unit gradient of the logit field at each query.

        Returns (normals tensor (m,3), valid mask); rows with vanishing
        gradient are flagged invalid and must be excluded from losses.
        """
        qt = Tensor(np.asarray(queries, np.float32), requires_grad=True)
        if tokens is None:
            tokens = self.decode_tokens(z)
        logits = self.query_tokens(tokens, qt)
        g = ad.grad(ad.tsum(logits), qt, create_graph=create_graph)
        norm2 = ad.tsum(ad.mul(g, g), axis=1, keepdims=True)
        valid = np.sqrt(norm2.data[:, 0]) > 1e-8
        n = ad.div(g, ad.sqrt(ad.add(norm2, 1e-12)))
        return n, valid

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------

    def recon_target(self, sdf):
        c = self.config
        if c.supervision == "tsdf_bce":
            return tsdf_label(sdf, c.delta).astype(np.float32)
        if c.supervision == "sdf_mse":
            return (np.clip(sdf, -c.delta, c.delta) / c.delta).astype(np.float32)
        return occupancy_label(sdf).astype(np.float32)

    def recon_loss(self, logits, sdf):
        target = Tensor(self.recon_target(np.asarray(sdf)))
        if self.config.supervision == "sdf_mse":
            diff = ad.sub(logits, target)
            return ad.mean(ad.mul(diff, diff))
        return ad.mean(ad.bce_with_logits(logits, target))

    def kl_loss(self, latent):
        m, lv = latent.mean, latent.logvar
        term = ad.sub(ad.sub(ad.add(ad.mul(m, m), ad.exp(lv)), lv), 1.0)
        return ad.mul(ad.mean(term), 0.5)

    def vae_loss(self, latent, z, batch, normal_batch=64, rng=None, train=True):
        """Weighted reconstruction + normal + KL terms on one sample batch.

        The normal term is evaluated only on near-surface points (|y| < delta
        and ground-truth normal available), capped at normal_batch.
        """
        c = self.config
        tokens = self.decode_tokens(z)
        logits = self.query_tokens(tokens, batch.coords.astype(np.float32))
        recon = self.recon_loss(logits, batch.sdf)

        near = batch.has_normal & (np.abs(batch.sdf) < c.delta)
        n_idx = np.flatnonzero(near)
        normal_term = Tensor(np.zeros(()))
        n_used = 0
        if len(n_idx) > 0 and c.lambda_normal > 0:
            if rng is not None and len(n_idx) > normal_batch:
                n_idx = rng.choice(n_idx, size=normal_batch, replace=False)
            n_idx = np.sort(n_idx)
            pred, valid = self.predicted_normal(
                z, batch.coords[n_idx], create_graph=train, tokens=tokens
            )
            if valid.any():
                gt = Tensor(batch.normals[n_idx].astype(np.float32))
                diff = ad.sub(pred, gt)
                per_point = ad.tsum(ad.mul(diff, diff), axis=1)
                mask = Tensor(valid.astype(np.float32))
                normal_term = ad.div(ad.tsum(ad.mul(per_point, mask)), float(max(valid.sum(), 1)))
                n_used = int(valid.sum())

        kl = self.kl_loss(latent)
        total = ad.add(
            ad.add(ad.mul(recon, c.lambda_bce), ad.mul(normal_term, c.lambda_normal)),
            ad.mul(kl, c.kl_weight),
        )
        return {"total": total, "bce": recon, "normal": normal_term, "kl": kl,
                "normal_points": n_used}

    # ------------------------------------------------------------------
    # reconstruction and probes
    # ------------------------------------------------------------------

    def extraction_field(self, logits_grid):
        """Orient the decoded lattice so values increase outward."""
        if self.config.supervision == "occ_bce":
            return -logits_grid
        return logits_grid

    def pseudo_sdf_grid(self, logits_grid):
        """Map decoder logits to approximate signed distance for rendering."""
        d = self.config.delta
        if self.config.supervision == "sdf_mse":
            return (logits_grid * d).astype(np.float32)
        s = 1.0 / (1.0 + np.exp(-logits_grid))
        if self.config.supervision == "occ_bce":
            return ((1.0 - 2.0 * s) * d).astype(np.float32)
        return ((2.0 * s - 1.0) * d).astype(np.float32)

    def encode_mean(self, cloud, k=None, seed=0, fps_start=None):
        """Eval-time latent: the posterior mean, no sampling."""
        with ad.no_grad():
            latent = self.encode(cloud, k=k, seed=seed, fps_start=fps_start)
        return latent

    def reconstruct(self, source, grid_res=64, k=None, seed=0, input_points=2048):
        """encode -> decode lattice -> marching cubes at the surface level."""
        if isinstance(source, SurfaceCloud):
            cloud = source
        else:
            cloud = sample_surface(source, input_points, seed)
        latent = self.encode_mean(cloud, k=k, seed=seed)
        grid = self.decode_grid(latent.mean, grid_res)
        return marching_cubes(self.extraction_field(grid), 0.0)

    def render_field(self, z, res=48):
        grid = self.decode_grid(z, res)
        return GridField(self.pseudo_sdf_grid(grid))

    def latent_noise_probe(self, latent, gt_points, scales, grid_res=48,
                           eval_points=4096, seed=0):
        """Decode mean latents under additive noise; report CD per scale."""
        from .geometry.mesh import sample_mesh_surface
        from .geometry.metrics import chamfer_distance

        rng = np.random.default_rng(seed)
        rows = []
        base = latent.mean.data
        for s in scales:
            noisy = base + (rng.standard_normal(base.shape) * s).astype(np.float32)
            grid = self.decode_grid(Tensor(noisy), grid_res)
            mesh = marching_cubes(self.extraction_field(grid), 0.0)
            if mesh.is_empty:
                cd = float("inf")
            else:
                pts = sample_mesh_surface(mesh, eval_points, rng.integers(2**63)).points
                cd = chamfer_distance(pts, gt_points)
            rows.append({"scale": float(s), "cd": cd, "mesh": mesh})
        return rows
