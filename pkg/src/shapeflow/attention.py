"""Softmax attention, the gated linear attention block, and a timing harness.

Two code paths exist on purpose:

* taped ops (`softmax_attention`, `linear_attention`) build the autodiff
  graph and are what the VAE and flow networks call;
* raw numpy kernels (`softmax_attention_infer`, `linear_attention_infer`)
  skip the tape, block the quadratic score matrix to bound memory, and are
  what `bench_attention` times at large token counts.

The linear block follows the gated design: K and Q pass through SiLU, K'V is
contracted first (O(n·d²)), the result is modulated by a sigmoid gate, then
projected out. There is no key-mass denominator.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import init_linear

__all__ = [
    "AttnParams",
    "init_attn_params",
    "softmax_attention",
    "linear_attention",
    "attention_block",
    "cross_attention",
    "softmax_attention_infer",
    "linear_attention_infer",
    "bench_attention",
    "write_bench_csv",
    "fit_loglog_slope",
]


@dataclass
class AttnParams:
    """Projection weights for one attention block."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_g: Tensor = None
    variant: str = "softmax"
    heads: int = 4

    def tensors(self, prefix):
        out = {
            f"{prefix}.wq.w": self.w_q,
            f"{prefix}.wk.w": self.w_k,
            f"{prefix}.wv.w": self.w_v,
            f"{prefix}.wo.w": self.w_o,
        }
        if self.w_g is not None:
            out[f"{prefix}.wg.w"] = self.w_g
        return out


def init_attn_params(d_model, heads, variant, rng, d_kv=None, out_scale=None):
    if d_model % heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
    if variant not in ("softmax", "linear"):
        raise ValueError(f"unknown attention variant '{variant}'")
    d_kv = d_kv or d_model
    tmp = {}
    init_linear(tmp, "q", d_model, d_model, rng, bias=False)
    init_linear(tmp, "k", d_kv, d_model, rng, bias=False)
    init_linear(tmp, "v", d_kv, d_model, rng, bias=False)
    init_linear(tmp, "o", d_model, d_model, rng, bias=False, scale=out_scale)
    w_g = None
    if variant == "linear":
        init_linear(tmp, "g", d_model, d_model, rng, bias=False)
        w_g = tmp["g.w"]
    return AttnParams(
        w_q=tmp["q.w"], w_k=tmp["k.w"], w_v=tmp["v.w"], w_o=tmp["o.w"],
        w_g=w_g, variant=variant, heads=heads,
    )


def _split_heads(x, heads):
    """(..., n, d) -> (..., heads, n, d/heads)"""
    n, d = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    x = ad.reshape(x, lead + (n, heads, d // heads))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x):
    """(..., heads, n, dh) -> (..., n, heads*dh)"""
    h, n, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    lead = x.shape[:-3]
    x = ad.swapaxes(x, -3, -2)
    return ad.reshape(x, lead + (n, h * dh))


def softmax_attention(q, k, v, heads=1):
    """row-softmax(QK^T / sqrt(dh)) V with dh the per-head width."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    dh = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    weights = ad.softmax_rows(scores)
    return _merge_heads(ad.matmul(weights, vh))


def linear_attention(x, params):
    """Gated linear attention: (SiLU(Q) (SiLU(K)^T V)) * sigmoid(G), projected."""
    if params.variant != "linear":
        raise ValueError("linear_attention requires variant='linear'")
    q = ad.silu(ad.matmul(x, params.w_q))
    k = ad.silu(ad.matmul(x, params.w_k))
    v = ad.matmul(x, params.w_v)
    g = ad.sigmoid(ad.matmul(x, params.w_g))
    qh, kh, vh = (_split_heads(t, params.heads) for t in (q, k, v))
    kv = ad.matmul(ad.swapaxes(kh, -1, -2), vh)  # (heads, dh, dh): contracted first
    out = _merge_heads(ad.matmul(qh, kv))
    return ad.matmul(ad.mul(out, g), params.w_o)


def attention_block(x, params):
    """Self-attention through one block, dispatched on the variant."""
    if params.variant == "linear":
        return linear_attention(x, params)
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(x, params.w_k)
    v = ad.matmul(x, params.w_v)
    return ad.matmul(softmax_attention(q, k, v, params.heads), params.w_o)


def cross_attention(x_q, x_kv, params):
    """Softmax attention with queries from x_q and keys/values from x_kv."""
    q = ad.matmul(x_q, params.w_q)
    k = ad.matmul(x_kv, params.w_k)
    v = ad.matmul(x_kv, params.w_v)
    return ad.matmul(softmax_attention(q, k, v, params.heads), params.w_o)


# ---------------------------------------------------------------------------
# inference kernels (no tape; used by the benchmark)
# ---------------------------------------------------------------------------


def _silu_np(x):
    return x / (1.0 + np.exp(-x))


def softmax_attention_infer(x, params, block_rows=None):
    """Blocked softmax self-attention forward; never materializes n x n."""
    n, d = x.shape
    heads = params.heads
    dh = d // heads
    q = x @ params.w_q.data
    k = x @ params.w_k.data
    v = x @ params.w_v.data
    if block_rows is None:
        block_rows = int(min(n, max(128, (1 << 24) // max(n, 1))))
    out = np.empty((n, d), dtype=np.float32)
    scale = np.float32(1.0 / np.sqrt(dh))
    for h in range(heads):
        qh = q[:, h * dh : (h + 1) * dh]
        kh_t = np.ascontiguousarray(k[:, h * dh : (h + 1) * dh].T)
        vh = v[:, h * dh : (h + 1) * dh]
        for start in range(0, n, block_rows):
            stop = min(start + block_rows, n)
            s = (qh[start:stop] @ kh_t) * scale
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=1, keepdims=True)
            out[start:stop, h * dh : (h + 1) * dh] = s @ vh
    return out @ params.w_o.data


def linear_attention_infer(x, params):
    """O(n d^2) forward of the gated linear block."""
    n, d = x.shape
    heads = params.heads
    dh = d // heads
    q = _silu_np(x @ params.w_q.data)
    k = _silu_np(x @ params.w_k.data)
    v = x @ params.w_v.data
    g = 1.0 / (1.0 + np.exp(-(x @ params.w_g.data)))
    out = np.empty((n, d), dtype=np.float32)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        kv = k[:, sl].T @ v[:, sl]
        out[:, sl] = q[:, sl] @ kv
    return (out * g) @ params.w_o.data


# ---------------------------------------------------------------------------
# timing harness
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    variant: str
    n: int
    d: int
    heads: int
    median_s: float
    mad_s: float
    times: list = field(default_factory=list, repr=False)


def bench_attention(token_counts, d=64, reps=5, warmup=1, heads=4, seed=0):
    """Median wall-clock per forward for both variants at each token count."""
    if reps < 5:
        raise ValueError("reps must be >= 5 for a stable median")
    rng = np.random.default_rng(seed)
    lin = init_attn_params(d, heads, "linear", rng)
    soft = init_attn_params(d, heads, "softmax", rng)
    rows = []
    for n in token_counts:
        x = rng.standard_normal((n, d)).astype(np.float32)
        for variant, fn, p in (
            ("linear", linear_attention_infer, lin),
            ("softmax", softmax_attention_infer, soft),
        ):
            for _ in range(warmup):
                fn(x, p)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn(x, p)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            mad = float(np.median(np.abs(np.array(times) - med)))
            rows.append(BenchRow(variant, int(n), int(d), heads, med, mad, times))
    return rows


def write_bench_csv(rows, path, threads=None):
    with open(path, "w", newline="") as fh:
        if threads is not None:
            fh.write(f"# threads={threads}\n")
        writer = csv.writer(fh)
        writer.writerow(["variant", "n", "d", "heads", "median_s", "mad_s"])
        for r in rows:
            writer.writerow([r.variant, r.n, r.d, r.heads, f"{r.median_s:.6e}", f"{r.mad_s:.6e}"])


def fit_loglog_slope(rows, variant):
    """Least-squares exponent of median time vs token count."""
    pts = [(r.n, r.median_s) for r in rows if r.variant == variant]
    if len(pts) < 2:
        raise ValueError(f"need at least two sizes for variant '{variant}'")
    xs = np.log([p[0] for p in pts])
    ys = np.log([max(p[1], 1e-9) for p in pts])
    slope, _ = np.polyfit(xs, ys, 1)
    return float(slope)


def plot_bench(rows, path):
    """Optional log-log plot next to the CSV (requires matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for variant, marker in (("linear", "o"), ("softmax", "s")):
        pts = sorted((r.n, r.median_s) for r in rows if r.variant == variant)
        if pts:
            ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker=marker, label=variant)
    ax.set_xlabel("tokens")
    ax.set_ylabel("median seconds / forward")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
