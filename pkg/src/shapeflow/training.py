"""Training, evaluation, and end-to-end generation pipelines.

Training owns its run directory exclusively: checkpoints, CSV logs, and the
serialized config land there and nothing outside it is written. Dataset
files are never mutated. Divergence (non-finite loss) halts a run and leaves
the last good checkpoint in place.
"""

import csv
import hashlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .config import save_config
from .dataset import manifest_specs
from .errors import ConfigError, DivergenceError
from .flow import FlowModel, condition_features
from .geometry.mesh import marching_cubes, sample_mesh_surface, save_obj_mesh, save_ply_mesh
from .geometry.metrics import chamfer_distance, f_score, normal_consistency
from .geometry.sampling import sample_surface, sample_volume
from .params import Adam, load_params, restore_params, save_params, split_checkpoint, zero_grads
from .render import camera_preset, render_any
from .search import zero_order_search
from .vae import VecSetVAE


def _shape_seed(shape_id, salt=0):
    digest = hashlib.md5(f"{salt}:{shape_id}".encode()).hexdigest()
    return int(digest[:15], 16)


class ShapeBank:
    """Per-shape sampled data, computed once and reused across steps."""

    def __init__(self, train_cfg, delta):
        self.cfg = train_cfg
        self.delta = delta
        self._cache = {}

    def get(self, entry, spec):
        sid = entry["id"]
        if sid not in self._cache:
            cloud = sample_surface(spec, self.cfg.surface_points, _shape_seed(sid, 1))
            samples = sample_volume(
                spec,
                self.cfg.volume_samples,
                self.cfg.near_fraction,
                self.cfg.near_sigma,
                _shape_seed(sid, 2),
                normal_band=self.delta,
            )
            self._cache[sid] = (cloud, samples)
        return self._cache[sid]


def _token_schedule(train_cfg, max_tokens):
    ks = [int(v) for v in str(train_cfg.token_schedule).split(",") if v.strip()]
    if not ks:
        raise ConfigError("empty token schedule")
    for k in ks:
        if k < 1 or k > max_tokens:
            raise ConfigError(f"token count {k} outside [1, {max_tokens}]")
    return ks


def save_vae_checkpoint(path, vae, optimizer=None, step=0):
    extra = {
        "meta.step": np.array([step], dtype=np.float32),
        "meta.latent_dim": np.array([vae.config.latent_dim], dtype=np.float32),
    }
    if optimizer is not None:
        extra.update(optimizer.state_arrays())
    save_params(path, vae.params, extra=extra)


def load_vae_checkpoint(path, config):
    vae = VecSetVAE(config)
    loaded = load_params(path)
    model_arrays, opt_arrays = split_checkpoint(loaded)
    meta = {k: v for k, v in model_arrays.items() if k.startswith("meta.")}
    model_arrays = {k: v for k, v in model_arrays.items() if not k.startswith("meta.")}
    restore_params(vae.params, model_arrays)
    step = int(meta.get("meta.step", np.zeros(1))[0])
    return vae, opt_arrays, step


def train_vae(manifest, run_config, run_dir, resume_from=None, log_every=100,
              progress=None):
    """Optimize the VAE over the train split; returns (vae, summary dict)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(run_config, run_dir / "config.txt")
    tc = run_config.train
    vae = VecSetVAE(run_config.vae, seed=run_config.seed)
    adam = Adam(vae.params, lr=tc.lr_vae, beta1=tc.beta1, beta2=tc.beta2)
    start_step = 0
    if resume_from is not None:
        vae, opt_arrays, start_step = load_vae_checkpoint(resume_from, run_config.vae)
        adam = Adam(vae.params, lr=tc.lr_vae, beta1=tc.beta1, beta2=tc.beta2)
        adam.restore(opt_arrays)

    entries = manifest_specs(manifest, split="train")
    if not entries:
        raise ConfigError("manifest has no training entries")
    bank = ShapeBank(tc, run_config.vae.delta)
    schedule = _token_schedule(tc, run_config.vae.max_tokens)
    rng = np.random.default_rng([run_config.seed, start_step])

    ckpt = run_dir / "vae.sgf1"
    log_path = run_dir / "vae_log.csv"
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    if not ckpt.exists():
        save_vae_checkpoint(ckpt, vae, adam, start_step)  # halting always has a fallback
    diverged = False
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "bce", "normal", "kl", "total"])
        for step in range(start_step, tc.steps):
            entry, spec = entries[rng.integers(len(entries))]
            cloud, samples = bank.get(entry, spec)
            k = schedule[rng.integers(len(schedule))]
            try:
                latent = vae.encode(cloud, k=k, fps_start=int(rng.integers(len(cloud))))
                z = vae.reparameterize(latent, seed=int(rng.integers(2**63)))
                idx = np.sort(rng.choice(len(samples), size=min(tc.query_batch, len(samples)),
                                         replace=False))
                losses = vae.vae_loss(latent, z, samples.subset(idx),
                                      normal_batch=tc.normal_batch, rng=rng)
                zero_grads(vae.params)
                ad.backward(losses["total"])
                adam.step()
            except NonFiniteError:
                diverged = True
                if ckpt.exists():
                    vae, _, _ = load_vae_checkpoint(ckpt, run_config.vae)
                break
            writer.writerow([
                step,
                f"{losses['bce'].item():.6f}",
                f"{losses['normal'].item():.6f}",
                f"{losses['kl'].item():.6f}",
                f"{losses['total'].item():.6f}",
            ])
            if progress and (step % log_every == 0 or step == tc.steps - 1):
                progress(step, losses)
            if (step + 1) % tc.checkpoint_every == 0:
                save_vae_checkpoint(ckpt, vae, adam, step + 1)
    if not diverged:
        save_vae_checkpoint(ckpt, vae, adam, tc.steps)
    summary = {"checkpoint": str(ckpt), "log": str(log_path), "diverged": diverged}
    if diverged:
        raise DivergenceError(f"VAE training diverged; last checkpoint: {ckpt}")
    return vae, summary


def save_flow_checkpoint(path, flow, optimizer=None, step=0):
    extra = {
        "meta.step": np.array([step], dtype=np.float32),
        "meta.latent_dim": np.array([flow.config.latent_dim], dtype=np.float32),
        "meta.token_count": np.array([flow.config.token_count], dtype=np.float32),
    }
    if optimizer is not None:
        extra.update(optimizer.state_arrays())
    save_params(path, flow.params, extra=extra)


def load_flow_checkpoint(path, config):
    flow = FlowModel(config)
    loaded = load_params(path)
    model_arrays, opt_arrays = split_checkpoint(loaded)
    model_arrays = {k: v for k, v in model_arrays.items() if not k.startswith("meta.")}
    restore_params(flow.params, model_arrays)
    return flow, opt_arrays


def compute_data_latents(vae, entries_specs, train_cfg, token_count):
    """Deterministic per-shape mean latents for flow training."""
    latents = {}
    for entry, spec in entries_specs:
        cloud = sample_surface(spec, train_cfg.surface_points, _shape_seed(entry["id"], 1))
        latent = vae.encode_mean(cloud, k=token_count,
                                 fps_start=_shape_seed(entry["id"], 3) % len(cloud))
        latents[entry["id"]] = latent.mean.data.copy()
    return latents


def train_flow(manifest, vae, run_config, run_dir, log_every=100, progress=None):
    """Train the rectified-flow generator on cached VAE latents."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(run_config, run_dir / "config.txt")
    fc = run_config.flow
    tc = run_config.train
    if fc.latent_dim != vae.config.latent_dim:
        raise ConfigError(
            f"latent dim mismatch: flow {fc.latent_dim} vs vae {vae.config.latent_dim}"
        )
    flow = FlowModel(fc, seed=run_config.seed)
    adam = Adam(flow.params, lr=tc.lr_flow, beta1=tc.beta1, beta2=tc.beta2)

    entries = manifest_specs(manifest, split="train")
    latents = compute_data_latents(vae, entries, tc, fc.token_count)
    features = {
        e["id"]: condition_features(spec, e["kind"], blocks=fc.cond_blocks)
        for e, spec in entries
    }
    by_kind = {
        "appearance": [e for e, _ in entries if e["kind"] == "appearance"],
        "normal": [e for e, _ in entries if e["kind"] == "normal"],
    }
    for kind, pool in by_kind.items():
        if not pool:
            raise ConfigError(f"manifest has no '{kind}' training entries")

    rng = np.random.default_rng([run_config.seed, 1])
    ckpt = run_dir / "flow.sgf1"
    log_path = run_dir / "flow_log.csv"
    save_flow_checkpoint(ckpt, flow, adam, 0)
    diverged = False
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step in range(tc.steps):
            half = max(tc.batch // 2, 1)
            picks = [by_kind["appearance"][rng.integers(len(by_kind["appearance"]))]
                     for _ in range(half)]
            picks += [by_kind["normal"][rng.integers(len(by_kind["normal"]))]
                      for _ in range(tc.batch - half)]
            x1 = np.stack([latents[e["id"]] for e in picks])
            feats = np.stack([features[e["id"]] for e in picks]).astype(np.float32)
            kinds = [e["kind"] for e in picks]
            try:
                loss = flow.train_step(adam, x1, feats, kinds, rng)
            except DivergenceError:
                diverged = True
                if ckpt.exists():
                    flow, _ = load_flow_checkpoint(ckpt, fc)
                break
            writer.writerow([step, f"{loss:.6f}"])
            if progress and (step % log_every == 0 or step == tc.steps - 1):
                progress(step, loss)
            if (step + 1) % tc.checkpoint_every == 0:
                save_flow_checkpoint(ckpt, flow, adam, step + 1)
    if not diverged:
        save_flow_checkpoint(ckpt, flow, adam, tc.steps)
    if diverged:
        raise DivergenceError(f"flow training diverged; last checkpoint: {ckpt}")
    return flow, {"checkpoint": str(ckpt), "log": str(log_path)}


def evaluate_reconstruction(manifest, vae, token_counts, eval_cfg, split="held_out",
                            limit=None, seed=0, out_csv=None):
    """Per-shape CD(x10^3), F-Score, and normal consistency per token count."""
    entries = manifest_specs(manifest, split=split)
    if not entries:
        raise ConfigError(f"manifest has no '{split}' entries")
    if limit:
        entries = entries[:limit]
    rows = []
    for entry, spec in entries:
        sid = entry["id"]
        cloud_in = sample_surface(spec, eval_cfg.input_points, _shape_seed(sid, 1))
        gt = sample_surface(spec, eval_cfg.points, _shape_seed(sid, 4) + seed)
        for k in token_counts:
            mesh = vae.reconstruct(cloud_in, grid_res=eval_cfg.grid_res, k=k,
                                   seed=_shape_seed(sid, 5))
            if mesh.is_empty:
                rows.append({"token_count": k, "shape": sid, "cd_e3": float("inf"),
                             "fscore": 0.0, "nc": 0.0})
                continue
            rec = sample_mesh_surface(mesh, eval_cfg.points, _shape_seed(sid, 6) + seed)
            rows.append({
                "token_count": k,
                "shape": sid,
                "cd_e3": 1e3 * chamfer_distance(rec.points, gt.points),
                "fscore": f_score(rec.points, gt.points, eval_cfg.fscore_tau),
                "nc": normal_consistency(rec, gt),
            })
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["token_count", "cd_e3", "fscore", "nc"])
            for r in rows:
                writer.writerow([r["token_count"], f"{r['cd_e3']:.4f}",
                                 f"{r['fscore']:.4f}", f"{r['nc']:.4f}"])
            for k in token_counts:
                sel = [r for r in rows if r["token_count"] == k]
                writer.writerow([
                    k,
                    f"{np.mean([r['cd_e3'] for r in sel]):.4f}",
                    f"{np.mean([r['fscore'] for r in sel]):.4f}",
                    f"{np.mean([r['nc'] for r in sel]):.4f}",
                ])
    return rows


def mean_metric(rows, token_count, key="cd_e3"):
    vals = [r[key] for r in rows if r["token_count"] == token_count]
    return float(np.mean(vals))


def end_to_end_generate(vae, flow, cond_source, kind="normal", steps=None, seed=0,
                        search_cfg=None, grid_res=64, out_mesh=None, out_trace=None,
                        view="front", mesh_format="ply", reference=None,
                        search_decode_res=None):
    """condition -> (sample | search) -> decode -> marching cubes -> mesh.

    cond_source is a ShapeSpec (reference rendered from it) or a NormalMap.
    Returns (mesh, trace_or_none, latent).
    """
    steps = steps or flow.config.steps_default
    cam = camera_preset(view)
    if hasattr(cond_source, "normals") and hasattr(cond_source, "mask"):
        ref_map = cond_source  # a NormalMap carries its own reference view
    else:
        ref_map = reference if reference is not None else render_any(cond_source, cam)
    feats = condition_features(cond_source, kind, camera=cam,
                               blocks=flow.config.cond_blocks)
    cond = flow.embed_condition(feats, kind)

    trace = None
    if search_cfg is not None:
        res = search_decode_res or search_cfg.decode_res
        latent, trace = zero_order_search(
            flow, cond, ref_map, search_cfg,
            decode_fn=lambda z: vae.render_field(Tensor(z), res=res),
            camera=cam,
        )
    else:
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((flow.config.token_count, flow.config.latent_dim))
        latent = flow.euler_sample(cond, steps, x0.astype(np.float32))

    grid = vae.decode_grid(Tensor(latent), grid_res)
    mesh = marching_cubes(vae.extraction_field(grid), 0.0)
    if out_mesh:
        if mesh_format == "obj":
            save_obj_mesh(mesh, out_mesh)
        else:
            save_ply_mesh(mesh, out_mesh)
    if trace is not None and out_trace:
        trace.save(out_trace)
    return mesh, trace, latent
