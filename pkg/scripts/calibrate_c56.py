"""Calibration run for the token-scaling and representation-ablation criteria."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from shapeflow.config import RunConfig
from shapeflow.dataset import generate_dataset, load_manifest, manifest_specs, random_shape
from shapeflow.geometry import chamfer_distance, f_score, sample_mesh_surface, sample_surface
from shapeflow.training import evaluate_reconstruction, mean_metric, train_vae
from shapeflow.vae import VaeConfig

OUT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/calib56")
OUT.mkdir(parents=True, exist_ok=True)


def make_rc(supervision):
    rc = RunConfig()
    rc.seed = 11
    rc.vae = VaeConfig(
        enc_layers=2, dec_layers=3, enc_width=96, dec_width=160, latent_dim=8,
        token_count=64, max_tokens=512, heads=4, supervision=supervision,
    )
    rc.train.steps = 1800
    rc.train.lr_vae = 1e-3
    rc.train.surface_points = 1024
    rc.train.volume_samples = 4096
    rc.train.query_batch = 320
    rc.train.normal_batch = 24
    rc.train.near_fraction = 0.5
    rc.train.near_sigma = 0.05
    rc.train.token_schedule = "32,64,128"
    rc.train.checkpoint_every = 600
    rc.eval.grid_res = 48
    rc.eval.points = 8192
    rc.eval.input_points = 1024
    return rc


def main():
    t0 = time.time()
    data_dir = OUT / "data"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(560, 11, data_dir)
    manifest = load_manifest(data_dir)
    held = [e for e in manifest["entries"] if e["split"] == "held_out"]
    print(f"dataset ready: {len(manifest['entries'])} shapes, {len(held)} held out "
          f"({time.time()-t0:.0f}s)", flush=True)

    vaes = {}
    for supervision in ("tsdf_bce", "sdf_mse", "occ_bce"):
        rc = make_rc(supervision)
        t1 = time.time()
        vae, _ = train_vae(manifest, rc, OUT / f"vae_{supervision}",
                           progress=lambda s, l, sv=supervision: print(
                               f"  [{sv}] step {s}: bce={l['bce'].item():.4f} "
                               f"normal={l['normal'].item():.3f}", flush=True)
                           if s % 300 == 0 else None)
        vaes[supervision] = (vae, rc)
        print(f"{supervision} trained in {time.time()-t1:.0f}s", flush=True)

    # ---- criterion 5: token scaling on 50 held-out shapes
    t1 = time.time()
    vae, rc = vaes["tsdf_bce"]
    rows = evaluate_reconstruction(manifest, vae, [64, 256, 512], rc.eval,
                                   split="held_out", limit=50, seed=0)
    cd64 = mean_metric(rows, 64)
    cd256 = mean_metric(rows, 256)
    cd512 = mean_metric(rows, 512)
    print(f"C5: CDx1e3 k64={cd64:.2f} k256={cd256:.2f} k512={cd512:.2f} "
          f"(256<=64: {cd256 <= cd64}, 512<=1.1*256: {cd512 <= 1.1 * cd256}) "
          f"[{time.time()-t1:.0f}s]", flush=True)
    for k in (64, 256, 512):
        fs = mean_metric(rows, k, "fscore")
        nc = mean_metric(rows, k, "nc")
        print(f"   k={k}: F={fs:.3f} NC={nc:.3f}", flush=True)

    # ---- criterion 6a: latent-noise robustness, tsdf vs sdf_mse
    t1 = time.time()
    specs = manifest_specs(manifest, split="held_out")[:8]
    probe_data = {}
    for name in ("tsdf_bce", "sdf_mse"):
        vae, rc = vaes[name]
        latents, gts, clean_cd = [], [], []
        stds = []
        for entry, spec in specs:
            cloud = sample_surface(spec, 1024, seed=hash(entry["id"]) % 2**32)
            lat = vae.encode_mean(cloud, k=64, seed=3)
            latents.append(lat)
            stds.append(lat.mean.data.std())
            gts.append(sample_surface(spec, 4096, seed=5).points)
        std_z = float(np.mean(stds))
        for lat, gt in zip(latents, gts):
            r = vae.latent_noise_probe(lat, gt, [0.0], grid_res=32, eval_points=4096, seed=1)
            clean_cd.append(r[0]["cd"])
        probe_data[name] = (vae, latents, gts, clean_cd, std_z)
        print(f"  {name}: std(z)={std_z:.3f} clean CDx1e3="
              f"{1e3*np.nanmean([c for c in clean_cd if np.isfinite(c)]):.2f}", flush=True)

    wins = 0
    for seed in range(10):
        degr = {}
        for name in ("tsdf_bce", "sdf_mse"):
            vae, latents, gts, clean_cd, std_z = probe_data[name]
            ds = []
            for lat, gt, c0 in zip(latents, gts, clean_cd):
                r = vae.latent_noise_probe(lat, gt, [0.5 * std_z], grid_res=32,
                                           eval_points=4096, seed=100 + seed)
                cd = r[0]["cd"]
                if np.isfinite(cd) and np.isfinite(c0):
                    ds.append(cd - c0)
                else:
                    ds.append(1.0)  # empty mesh counts as catastrophic
            degr[name] = float(np.mean(ds))
        win = degr["tsdf_bce"] < degr["sdf_mse"]
        wins += win
        print(f"  seed {seed}: d_tsdf={1e3*degr['tsdf_bce']:.2f} "
              f"d_mse={1e3*degr['sdf_mse']:.2f} win={win}", flush=True)
    print(f"C6a: tsdf wins {wins}/10 [{time.time()-t1:.0f}s]", flush=True)

    # ---- criterion 6b: thin-shell F-score, tsdf vs occ
    t1 = time.time()
    rng = np.random.default_rng(77)
    shells = []
    while len(shells) < 10:
        s = random_shape(rng, "shell", name=f"shell_eval_{len(shells)}")
        if s.shell_thickness >= 0.025:
            shells.append(s)
    meshes = {}
    for name in ("tsdf_bce", "occ_bce"):
        vae, rc = vaes[name]
        ms = []
        for i, spec in enumerate(shells):
            cloud = sample_surface(spec, 1024, seed=1000 + i)
            ms.append(vae.reconstruct(cloud, grid_res=96, k=64, seed=3))
        meshes[name] = ms
    wins_b = 0
    for seed in range(10):
        fmeans = {}
        for name in ("tsdf_bce", "occ_bce"):
            fs = []
            for i, spec in enumerate(shells):
                mesh = meshes[name][i]
                if mesh.is_empty:
                    fs.append(0.0)
                    continue
                rec = sample_mesh_surface(mesh, 8192, seed=200 + seed)
                gt = sample_surface(spec, 8192, seed=300 + seed * 7 + i)
                fs.append(f_score(rec.points, gt.points, 0.02))
            fmeans[name] = float(np.mean(fs))
        win = fmeans["tsdf_bce"] > fmeans["occ_bce"]
        wins_b += win
        print(f"  seed {seed}: F_tsdf={fmeans['tsdf_bce']:.3f} "
              f"F_occ={fmeans['occ_bce']:.3f} win={win}", flush=True)
    print(f"C6b: tsdf wins {wins_b}/10 [{time.time()-t1:.0f}s]", flush=True)
    print(f"TOTAL {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
