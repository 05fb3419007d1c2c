"""Synthetic model builders for tests, benchmarks and demos.

make_planted_model builds the structured fixture used by the ordering
benchmarks: attention matrices are planted low-rank (q/k more strongly
than v/o) plus noise, FFN matrices are full-spectrum with a minority of
strong intermediate channels, and a few embedding features carry outlier
magnitudes so the calibration norms have high dynamic range.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ModelConfig
from .container import write_container
from .transformer import (
    Dense,
    TransformerLayer,
    TransformerModel,
    detokenize_bytes,
    model_to_tensors,
    rms_norm,
    silu,
)
from .util import canonical_json


def toy_config(n_layers: int = 2) -> ModelConfig:
    """The reference desk-scale shape: d=64, 4 heads, d_m=172, byte vocab."""
    return ModelConfig(
        dim=64, n_heads=4, head_dim=16, n_layers=n_layers, ffn_dim=172, vocab_size=256
    )


def _layer_from_arrays(d: int, arrays: dict[str, np.ndarray]) -> TransformerLayer:
    return TransformerLayer(
        attn_norm=np.ones(d),
        q=Dense(arrays["q"]),
        k=Dense(arrays["k"]),
        v=Dense(arrays["v"]),
        o=Dense(arrays["o"]),
        ffn_norm=np.ones(d),
        gate=Dense(arrays["gate"]),
        up=Dense(arrays["up"]),
        down=Dense(arrays["down"]),
    )


def make_random_model(config: ModelConfig, seed: int, scale: float = 0.05) -> TransformerModel:
    """Plain random-init model; every weight is N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    d, d_m = config.dim, config.ffn_dim
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            _layer_from_arrays(
                d,
                {
                    "q": rng.normal(0.0, scale, (d, d)),
                    "k": rng.normal(0.0, scale, (d, d)),
                    "v": rng.normal(0.0, scale, (d, d)),
                    "o": rng.normal(0.0, scale, (d, d)),
                    "gate": rng.normal(0.0, scale, (d_m, d)),
                    "up": rng.normal(0.0, scale, (d_m, d)),
                    "down": rng.normal(0.0, scale, (d, d_m)),
                },
            )
        )
    return TransformerModel(
        config=config,
        embed=rng.normal(0.0, 1.0, (config.vocab_size, d)),
        layers=tuple(layers),
        final_norm=np.ones(d),
        lm_head=rng.normal(0.0, scale, (config.vocab_size, d)),
    )


def _planted_low_rank(rng: np.random.Generator, d_out: int, d_in: int, rank: int, scale: float, noise: float) -> np.ndarray:
    a = rng.normal(0.0, 1.0, (d_out, rank))
    b = rng.normal(0.0, 1.0, (rank, d_in))
    w = (a @ b) * (scale / np.sqrt(rank))
    return w + rng.normal(0.0, noise * scale, (d_out, d_in))


def make_planted_model(
    config: ModelConfig,
    seed: int,
    qk_rank: int = 6,
    vo_rank: int = 20,
    noise: float = 0.03,
    attn_scale: float = 0.25,
    ffn_scale: float = 0.20,
    head_scale: float = 0.30,
    n_outlier_features: int = 8,
    outlier_scale: float = 6.0,
    strong_channel_frac: float = 0.25,
    strong_channel_scale: float = 4.0,
) -> TransformerModel:
    """Fixture with planted structure matching the method's assumptions.

    Attention weights are low-rank plus noise (q/k lower-rank than v/o),
    FFN weights have a flat spectrum but concentrate their output energy
    in a strong minority of intermediate channels, and the embedding
    carries a few outlier features so input-norm weighting has signal.
    """
    rng = np.random.default_rng(seed)
    d, d_m = config.dim, config.ffn_dim

    embed = rng.normal(0.0, 1.0, (config.vocab_size, d))
    outlier = rng.choice(d, size=n_outlier_features, replace=False)
    embed[:, outlier] *= outlier_scale

    layers = []
    for _ in range(config.n_layers):
        gate = rng.normal(0.0, ffn_scale, (d_m, d))
        up = rng.normal(0.0, ffn_scale, (d_m, d))
        down = rng.normal(0.0, ffn_scale, (d, d_m))
        n_strong = max(1, int(round(strong_channel_frac * d_m)))
        strong = rng.choice(d_m, size=n_strong, replace=False)
        gate[strong, :] *= strong_channel_scale
        up[strong, :] *= strong_channel_scale
        layers.append(
            _layer_from_arrays(
                d,
                {
                    "q": _planted_low_rank(rng, d, d, qk_rank, attn_scale, noise),
                    "k": _planted_low_rank(rng, d, d, qk_rank, attn_scale, noise),
                    "v": _planted_low_rank(rng, d, d, vo_rank, attn_scale, noise),
                    "o": _planted_low_rank(rng, d, d, vo_rank, attn_scale, noise),
                    "gate": gate,
                    "up": up,
                    "down": down,
                },
            )
        )
    return TransformerModel(
        config=config,
        embed=embed,
        layers=tuple(layers),
        final_norm=np.ones(d),
        lm_head=rng.normal(0.0, head_scale, (config.vocab_size, d)),
    )


def random_token_stream(n_tokens: int, seed: int, vocab_size: int = 256) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=n_tokens, dtype=np.int64)


def sample_from_model(
    model: TransformerModel,
    n_tokens: int,
    seed: int,
    window: int = 64,
    temperature: float = 1.0,
) -> np.ndarray:
    """Ancestral samples from the model itself, in independent windows.

    Data drawn from the model's own distribution makes its perplexity
    meaningful without training: the dense model scores its predictive
    entropy, and any compression damage shows up as excess perplexity.
    All windows are generated in one batched sweep with per-window k/v
    state; the per-position conditionals match transformer.forward
    exactly (asserted in the test suite).
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    n_windows = -(-n_tokens // window)
    tokens = np.empty((n_windows, window), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, cfg.vocab_size, size=n_windows)

    d_h = cfg.head_dim
    k_cache: list[list[np.ndarray]] = [[] for _ in model.layers]
    v_cache: list[list[np.ndarray]] = [[] for _ in model.layers]

    for t in range(window):
        x = model.embed[tokens[:, t]]  # (B, d)
        for li, layer in enumerate(model.layers):
            n_heads = layer.n_heads(cfg)
            h = rms_norm(x, layer.attn_norm, cfg.norm_eps)
            q = layer.q(h).reshape(-1, n_heads, d_h)
            k = layer.k(h).reshape(-1, n_heads, d_h)
            v = layer.v(h).reshape(-1, n_heads, d_h)
            q, k = _rope_single_position(q, k, t, cfg.rope_theta)
            k_cache[li].append(k)
            v_cache[li].append(v)
            ks = np.stack(k_cache[li], axis=1)  # (B, t+1, nh, dh)
            vs = np.stack(v_cache[li], axis=1)
            scores = np.einsum("bhd,bthd->bht", q, ks) / np.sqrt(d_h)
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            context = np.einsum("bht,bthd->bhd", probs, vs).reshape(-1, n_heads * d_h)
            x = x + layer.o(context)
            h2 = rms_norm(x, layer.ffn_norm, cfg.norm_eps)
            x = x + layer.down(silu(layer.gate(h2)) * layer.up(h2))
        if t + 1 < window:
            logits = rms_norm(x, model.final_norm, cfg.norm_eps) @ model.lm_head.T
            z = logits / temperature
            z -= z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            u = rng.random(n_windows)
            tokens[:, t + 1] = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    return tokens.reshape(-1)[:n_tokens]


def _rope_single_position(q: np.ndarray, k: np.ndarray, pos: int, theta: float):
    """Rotate (B, nh, dh)-shaped q and k at a single stream position."""
    d_h = k.shape[-1]
    half = d_h // 2
    inv_freq = theta ** (-2.0 * np.arange(half) / d_h)
    ang = pos * inv_freq
    cos, sin = np.cos(ang), np.sin(ang)

    def rot(x):
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out

    return rot(q), rot(k)


def write_fixture(
    out_dir: str | Path,
    seed: int = 0,
    n_layers: int = 2,
    calib_tokens: int = 8192,
    eval_tokens: int = 4096,
    planted: bool = True,
) -> Path:
    """Write a self-contained fixture: model, config, calib and eval tokens.

    The planted fixture ships data sampled from the model itself, so its
    perplexity reflects compression damage rather than noise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = toy_config(n_layers)
    if planted:
        model = make_planted_model(config, seed)
        calib = sample_from_model(model, calib_tokens, seed + 1, window=64)
        evalset = sample_from_model(model, eval_tokens, seed + 2, window=64)
    else:
        model = make_random_model(config, seed)
        calib = random_token_stream(calib_tokens, seed + 1)
        evalset = random_token_stream(eval_tokens, seed + 2)
    write_container(out_dir / "model.safetensors", model_to_tensors(model))
    (out_dir / "config.json").write_text(canonical_json(config.to_dict()), encoding="utf-8")
    (out_dir / "calib.bin").write_bytes(detokenize_bytes(calib))
    (out_dir / "eval.bin").write_bytes(detokenize_bytes(evalset))
    return out_dir


def _main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Write a synthetic model fixture.")
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--random", action="store_true", help="plain random init instead of planted structure")
    args = parser.parse_args(argv)
    path = write_fixture(args.out_dir, seed=args.seed, n_layers=args.layers, planted=not args.random)
    print(f"fixture written to {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
