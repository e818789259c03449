"""Command-line surface.

Commands: gen-data, train-vae, train-flow, recon-eval, generate,
search-generate, bench-attn, probe-noise, bench-kernels.
Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 IO failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .accel import set_num_threads
from .errors import ConfigError, DivergenceError


def _add_common(p):
    p.add_argument("--config", type=str, default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=str, default="runs/out", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="numba thread count")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shapeflow",
        description="Desk-scale 3D shape synthesis: set-latent VAE, rectified flow, "
                    "and zero-order inference-time search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural shape dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("train-vae", help="train the set-latent VAE")
    _add_common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")

    p = sub.add_parser("train-flow", help="train the rectified-flow generator")
    _add_common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--vae", type=str, required=True, help="VAE run directory")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("recon-eval", help="evaluate VAE reconstruction metrics")
    _add_common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--vae", type=str, required=True)
    p.add_argument("--tokens", type=str, default="64,256")
    p.add_argument("--split", type=str, default="held_out")
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("generate", help="sample a shape from a condition")
    _add_common(p)
    p.add_argument("--vae", type=str, required=True)
    p.add_argument("--flow", type=str, required=True)
    p.add_argument("--cond-file", type=str, required=True,
                   help="ShapeSpec json or raw normal map (.raw)")
    p.add_argument("--cond-kind", type=str, default="normal",
                   choices=["normal", "appearance"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--format", type=str, default="ply", choices=["ply", "obj"])
    p.add_argument("--view", type=str, default="front", choices=["front", "top", "left"])
    p.add_argument("--search", action="store_true", help="run zero-order search")

    p = sub.add_parser("search-generate", help="generate with zero-order search")
    _add_common(p)
    p.add_argument("--vae", type=str, required=True)
    p.add_argument("--flow", type=str, required=True)
    p.add_argument("--cond-file", type=str, required=True)
    p.add_argument("--cond-kind", type=str, default="normal",
                   choices=["normal", "appearance"])
    p.add_argument("--reference-file", type=str, default=None,
                   help="raw normal map to verify against (defaults to the condition)")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--branch", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="sampler steps per candidate")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="perturbation neighborhood size")
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--format", type=str, default="ply", choices=["ply", "obj"])
    p.add_argument("--view", type=str, default="front", choices=["front", "top", "left"])
    p.add_argument("--trace", type=str, default=None, help="trace JSON path")

    p = sub.add_parser("bench-attn", help="time linear vs softmax attention")
    _add_common(p)
    p.add_argument("--tokens", type=str, default="4096,8192,16384,32768,65536")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="emit a log-log PNG next to the CSV")

    p = sub.add_parser("probe-noise", help="latent-noise robustness probe")
    _add_common(p)
    p.add_argument("--vae", type=str, required=True)
    p.add_argument("--shape", type=str, required=True)
    p.add_argument("--scales", type=str, default="0,0.1,0.25,0.5")
    p.add_argument("--grid-res", type=int, default=48)
    p.add_argument("--tokens", type=int, default=None)

    p = sub.add_parser("bench-kernels", help="compare numba kernels vs numpy fallbacks")
    _add_common(p)
    p.add_argument("--reps", type=int, default=3)

    return parser


def _load_run_config(args):
    from .config import RunConfig, load_config

    rc = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.seed = args.seed
    return rc


def _load_vae_run(path, rc=None):
    from .config import RunConfig, load_config
    from .training import load_vae_checkpoint

    path = Path(path)
    run_dir = path if path.is_dir() else path.parent
    ckpt = path if path.is_file() else run_dir / "vae.sgf1"
    cfg_file = run_dir / "config.txt"
    rc = load_config(cfg_file) if cfg_file.exists() else (rc or RunConfig())
    vae, _, _ = load_vae_checkpoint(ckpt, rc.vae)
    return vae, rc


def _load_flow_run(path, rc=None):
    from .config import RunConfig, load_config
    from .training import load_flow_checkpoint

    path = Path(path)
    run_dir = path if path.is_dir() else path.parent
    ckpt = path if path.is_file() else run_dir / "flow.sgf1"
    cfg_file = run_dir / "config.txt"
    rc = load_config(cfg_file) if cfg_file.exists() else (rc or RunConfig())
    flow, _ = load_flow_checkpoint(ckpt, rc.flow)
    return flow, rc


def _load_cond_source(path):
    from .geometry.shapes import ShapeSpec
    from .render import load_normal_map_raw

    path = Path(path)
    if path.suffix == ".json":
        return ShapeSpec.load(path)
    return load_normal_map_raw(path)


def run(args):
    out_dir = Path(args.out)
    if args.threads:
        set_num_threads(args.threads)

    if args.command == "gen-data":
        from .dataset import generate_dataset

        rc = _load_run_config(args)
        count = args.count or rc.data.count
        manifest = generate_dataset(count, rc.seed, out_dir,
                                    rc.data.solid_fraction, rc.data.csg_fraction)
        print(f"wrote {len(manifest['entries'])} shapes to {out_dir} "
              f"(counts: {manifest['counts']})")
        return 0

    if args.command == "train-vae":
        from .dataset import load_manifest
        from .training import train_vae

        rc = _load_run_config(args)
        if args.steps:
            rc.train.steps = args.steps
        manifest = load_manifest(args.manifest)

        def progress(step, losses):
            print(f"step {step}: total={losses['total'].item():.4f} "
                  f"bce={losses['bce'].item():.4f} kl={losses['kl'].item():.5f}")

        _, summary = train_vae(manifest, rc, out_dir, resume_from=args.resume,
                               progress=progress)
        print(f"checkpoint: {summary['checkpoint']}")
        return 0

    if args.command == "train-flow":
        from .dataset import load_manifest
        from .training import train_flow

        rc = _load_run_config(args)
        if args.steps:
            rc.train.steps = args.steps
        vae, vae_rc = _load_vae_run(args.vae)
        rc.vae = vae_rc.vae
        rc.flow.latent_dim = vae_rc.vae.latent_dim
        manifest = load_manifest(args.manifest)
        _, summary = train_flow(manifest, vae, rc, out_dir,
                                progress=lambda s, l: print(f"step {s}: loss={l:.4f}"))
        print(f"checkpoint: {summary['checkpoint']}")
        return 0

    if args.command == "recon-eval":
        from .dataset import load_manifest
        from .training import evaluate_reconstruction, mean_metric

        rc = _load_run_config(args)
        vae, _ = _load_vae_run(args.vae, rc)
        manifest = load_manifest(args.manifest)
        tokens = [int(t) for t in args.tokens.split(",")]
        out_dir.mkdir(parents=True, exist_ok=True)
        out_csv = out_dir / "recon_eval.csv"
        rows = evaluate_reconstruction(manifest, vae, tokens, rc.eval,
                                       split=args.split, limit=args.limit,
                                       seed=rc.seed, out_csv=out_csv)
        for k in tokens:
            print(f"k={k}: CDx1e3={mean_metric(rows, k):.3f} "
                  f"F={mean_metric(rows, k, 'fscore'):.3f} "
                  f"NC={mean_metric(rows, k, 'nc'):.3f}")
        print(f"csv: {out_csv}")
        return 0

    if args.command in ("generate", "search-generate"):
        from .render import load_normal_map_raw
        from .search import SearchConfig
        from .training import end_to_end_generate

        rc = _load_run_config(args)
        vae, _ = _load_vae_run(args.vae)
        flow, _ = _load_flow_run(args.flow)
        cond_source = _load_cond_source(args.cond_file)
        out_dir.mkdir(parents=True, exist_ok=True)

        search_cfg = None
        trace_path = None
        if args.command == "search-generate" or getattr(args, "search", False):
            s = rc.search
            search_cfg = SearchConfig(
                rounds=getattr(args, "rounds", None) or s.rounds,
                branch=getattr(args, "branch", None) or s.branch,
                neighborhood_lambda=(getattr(args, "lam", None)
                                     if getattr(args, "lam", None) is not None
                                     else s.neighborhood_lambda),
                steps_per_sample=args.steps or s.steps_per_sample,
                seed=rc.seed,
                decode_res=s.decode_res,
            )
            trace_path = getattr(args, "trace", None) or (out_dir / "trace.json")
        reference = None
        if getattr(args, "reference_file", None):
            reference = load_normal_map_raw(args.reference_file)

        mesh_path = out_dir / f"mesh.{args.format}"
        mesh, trace, _ = end_to_end_generate(
            vae, flow, cond_source, kind=args.cond_kind,
            steps=None if search_cfg else args.steps, seed=rc.seed,
            search_cfg=search_cfg, grid_res=args.grid_res,
            out_mesh=mesh_path, out_trace=trace_path, view=args.view,
            mesh_format=args.format, reference=reference,
        )
        print(f"mesh: {mesh_path} ({len(mesh.triangles)} triangles)")
        if trace is not None:
            print(f"trace: {trace_path} (best={trace.best_score:.4f}, "
                  f"NFE={trace.total_nfe})")
        return 0

    if args.command == "bench-attn":
        from .attention import bench_attention, fit_loglog_slope, write_bench_csv

        rc = _load_run_config(args)
        tokens = [int(t) for t in args.tokens.split(",")]
        rows = bench_attention(tokens, d=args.d, reps=args.reps,
                               warmup=args.warmup, heads=args.heads, seed=rc.seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "bench_attn.csv"
        write_bench_csv(rows, csv_path, threads=args.threads)
        for r in rows:
            print(f"{r.variant:8s} n={r.n:6d} median={r.median_s:.5f}s mad={r.mad_s:.2e}")
        if len(tokens) >= 2:
            print(f"slope linear={fit_loglog_slope(rows, 'linear'):.2f} "
                  f"softmax={fit_loglog_slope(rows, 'softmax'):.2f}")
        if args.plot:
            from .attention import plot_bench

            plot_bench(rows, out_dir / "bench_attn.png")
        print(f"csv: {csv_path}")
        return 0

    if args.command == "probe-noise":
        from .geometry.sampling import sample_surface
        from .geometry.shapes import ShapeSpec

        rc = _load_run_config(args)
        vae, _ = _load_vae_run(args.vae, rc)
        spec = ShapeSpec.load(args.shape)
        scales = [float(s) for s in args.scales.split(",")]
        cloud = sample_surface(spec, rc.eval.input_points, rc.seed)
        gt = sample_surface(spec, rc.eval.points, rc.seed + 1)
        latent = vae.encode_mean(cloud, k=args.tokens, seed=rc.seed)
        rows = vae.latent_noise_probe(latent, gt.points, scales,
                                      grid_res=args.grid_res, seed=rc.seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = [{"scale": r["scale"], "cd_e3": 1e3 * r["cd"]} for r in rows]
        with open(out_dir / "probe_noise.json", "w") as fh:
            json.dump(report, fh, indent=1)
        for r in report:
            print(f"scale={r['scale']:.3f}: CDx1e3={r['cd_e3']:.3f}")
        return 0

    if args.command == "bench-kernels":
        from .benchkernels import format_kernel_bench, run_kernel_bench, write_kernel_bench_csv

        rc = _load_run_config(args)
        rows = run_kernel_bench(reps=args.reps, seed=rc.seed)
        print(format_kernel_bench(rows))
        out_dir.mkdir(parents=True, exist_ok=True)
        write_kernel_bench_csv(rows, out_dir / "bench_kernels.csv")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
