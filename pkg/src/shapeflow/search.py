"""Zero-order inference-time search over sampling noises.

Each round perturbs the pivot noise into a small candidate set (the pivot
itself is always candidate 0, which makes the best score non-decreasing),
samples every candidate to a latent, decodes it to a coarse field, renders
the front view, and scores it against the reference normal map by cosine
similarity of blockwise descriptors. The best candidate's noise becomes the
next pivot. NFE spent equals rounds * branch * steps_per_sample exactly; the
final full-quality decode is not part of that budget and the trace says so.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .render import camera_preset, descriptor_cosine, normal_map_descriptor, render_any


@dataclass
class SearchConfig:
    rounds: int = 8
    branch: int = 4
    neighborhood_lambda: float = 0.25
    steps_per_sample: int = 25
    seed: int = 0
    decode_res: int = 48

    def __post_init__(self):
        if self.rounds < 1 or self.branch < 1:
            raise ValueError("rounds and branch must be >= 1")
        if not 0.0 <= self.neighborhood_lambda <= 1.0:
            raise ValueError("neighborhood_lambda must lie in [0,1]")
        total = self.rounds * self.branch * self.steps_per_sample
        if total <= 0 or total > 2**31:
            raise ValueError(f"NFE budget {total} out of range")

    @property
    def total_nfe(self):
        return self.rounds * self.branch * self.steps_per_sample


@dataclass
class SearchTrace:
    config: dict
    rounds: list = field(default_factory=list)
    best_score: float = -1.0
    total_nfe: int = 0
    pivot_hash: str = ""
    nfe_excludes_final_decode: bool = True

    def to_json(self):
        return {
            "config": self.config,
            "rounds": self.rounds,
            "best": self.best_score,
            "total_nfe": self.total_nfe,
            "pivot_hash": self.pivot_hash,
            "nfe_excludes_final_decode": self.nfe_excludes_final_decode,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def noise_hash(noise):
    return hashlib.sha256(np.ascontiguousarray(noise, np.float32).tobytes()).hexdigest()[:16]


def perturb_noise(pivot, lam, rng):
    """Mix the pivot with fresh noise, preserving variance in expectation."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0,1]")
    pivot = np.asarray(pivot, dtype=np.float32)
    eps = rng.standard_normal(pivot.shape).astype(np.float32)
    return np.sqrt(1.0 - lam * lam).astype(np.float32) * pivot + np.float32(lam) * eps


def verifier_score(candidate, reference, camera=None, blocks=(8, 8), render_kwargs=None):
    """Cosine similarity of rendered-vs-reference normal-map descriptors.

    Returns (score in [-1,1], empty_flag); an empty candidate render scores
    -1 with the flag set.
    """
    cam = camera or camera_preset("front")
    rendered = render_any(candidate, cam, **(render_kwargs or {}))
    d_cand, empty_c = normal_map_descriptor(rendered, blocks)
    d_ref, empty_r = normal_map_descriptor(reference, blocks)
    if empty_c or empty_r:
        return -1.0, True
    return descriptor_cosine(d_cand, d_ref), False


def zero_order_search(model, cond, reference, cfg, decode_fn, camera=None):
    """Iteratively refine the sampling noise guided by the verifier.

    decode_fn maps a sampled latent to something renderable (typically a
    coarse GridField from the VAE). Returns (best latent, SearchTrace).
    """
    cam = camera or camera_preset("front")
    noise_shape = (model.config.token_count, model.config.latent_dim)
    pivot = np.random.default_rng([cfg.seed, 0]).standard_normal(noise_shape).astype(np.float32)
    trace = SearchTrace(config=asdict(cfg))
    nfe_start = model.nfe
    best_latent = None
    best_score = -np.inf
    for rnd in range(cfg.rounds):
        scores = []
        round_best = -np.inf
        round_best_noise = None
        for cand_idx in range(cfg.branch):
            if cand_idx == 0:
                noise = pivot
            else:
                rng = np.random.default_rng([cfg.seed, rnd + 1, cand_idx])
                noise = perturb_noise(pivot, cfg.neighborhood_lambda, rng)
            latent = model.euler_sample(cond, cfg.steps_per_sample, noise)
            fieldobj = decode_fn(latent)
            score, _ = verifier_score(fieldobj, reference, camera=cam)
            scores.append(float(score))
            if score > round_best:
                round_best = score
                round_best_noise = noise
                if score > best_score:
                    best_score = score
                    best_latent = latent
        pivot = round_best_noise
        trace.rounds.append({"round": rnd, "scores": scores, "best": float(round_best),
                             "pivot_hash": noise_hash(pivot)})
    trace.best_score = float(best_score)
    trace.total_nfe = model.nfe - nfe_start
    trace.pivot_hash = noise_hash(pivot)
    if trace.total_nfe != cfg.total_nfe:
        raise RuntimeError(
            f"NFE accounting broke: spent {trace.total_nfe}, budget {cfg.total_nfe}"
        )
    return best_latent, trace
