"""Shared fixtures for small models and finite-difference oracles."""

import numpy as np

from tft import tensor as T
from tft.model import Ablations, Batch, TFTConfig, VariableSpec

STATIC = (VariableSpec("s0", "categorical", 4), VariableSpec("s1", "real"))
PAST = (VariableSpec("y", "real"), VariableSpec("z", "real"), VariableSpec("c", "categorical", 6))
FUTURE = (VariableSpec("c", "categorical", 6), VariableSpec("x", "real"))


def tiny_config(flags=(), **kw) -> TFTConfig:
    base = dict(
        k=4,
        tau_max=2,
        d_model=8,
        num_heads=2,
        dropout=0.0,
        static_vars=STATIC,
        past_vars=PAST,
        future_vars=FUTURE,
        ablations=Ablations.from_names(flags),
    )
    base.update(kw)
    return TFTConfig(**base)


def random_batch(cfg: TFTConfig, bsz: int, rng: np.random.Generator) -> Batch:
    def cols(specs, lead):
        out = []
        for v in specs:
            if v.kind == "categorical":
                out.append(rng.integers(0, v.cardinality + 1, lead).astype(float))
            else:
                out.append(rng.normal(size=lead))
        return np.stack(out, axis=-1) if out else np.zeros(lead + (0,))

    return Batch(
        static=cols(cfg.static_vars, (bsz,)),
        past=cols(cfg.past_vars, (bsz, cfg.k + 1)),
        future=cols(cfg.future_vars, (bsz, cfg.tau_max)),
        target=rng.normal(size=(bsz, cfg.tau_max)),
    )


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return g


def max_rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.abs(a) + np.abs(n)
    keep = denom >= floor
    return float((np.abs(a - n)[keep] / denom[keep]).max()) if keep.any() else 0.0
