"""Minimal LLaMA-style forward pass on numpy.

Runs one token stream at a time in float64 with no KV cache, no batching
and no sampling: just enough machinery to capture calibration
activations, score perplexity, and count parameters/MACs.  Factored
matrices participate in the forward as two sequential products (R then
L), pruned FFNs at their reduced width, head-pruned attention with its
reduced head count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import store
from .config import ModelConfig
from .errors import CalibrationError, DataError, ShapeMismatchError

SITE_ATTN_INPUT = "attn_input"          # input to q/k/v projections
SITE_ATTN_O_INPUT = "attn_o_input"      # input to the o projection (head concat)
SITE_FFN_INPUT = "ffn_input"            # input to gate/up projections
SITE_FFN_DOWN_INPUT = "ffn_down_input"  # input to the down projection
ALL_SITES = (SITE_ATTN_INPUT, SITE_ATTN_O_INPUT, SITE_FFN_INPUT, SITE_FFN_DOWN_INPUT)

BYTE_VOCAB = 256


# ---------------------------------------------------------------------------
# Linear maps


@dataclass(frozen=True)
class Dense:
    """A y = Wx projection, applied to row-stacked positions."""

    w: np.ndarray  # (d_out, d_in)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape

    @property
    def n_params(self) -> int:
        return int(self.w.size)

    @property
    def macs_per_position(self) -> int:
        return int(self.w.size)


@dataclass(frozen=True)
class Factored:
    """A low-rank replacement y = L (R x); R is applied first."""

    l: np.ndarray  # (d_out, r)
    r: np.ndarray  # (r, d_in)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.r.T) @ self.l.T

    @property
    def rank(self) -> int:
        return self.l.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.l.shape[0], self.r.shape[1])

    @property
    def n_params(self) -> int:
        return int(self.l.size + self.r.size)

    @property
    def macs_per_position(self) -> int:
        return int(self.l.size + self.r.size)


LinearMap = Dense | Factored


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class TransformerLayer:
    attn_norm: np.ndarray
    q: LinearMap
    k: LinearMap
    v: LinearMap
    o: LinearMap
    ffn_norm: np.ndarray
    gate: LinearMap
    up: LinearMap
    down: LinearMap
    kept_heads: tuple[int, ...] | None = None       # set when heads were pruned
    retained_channels: np.ndarray | None = None     # set when FFN channels were pruned

    def n_heads(self, config: ModelConfig) -> int:
        if self.kept_heads is not None:
            return len(self.kept_heads)
        return self.q.shape[0] // config.head_dim

    @property
    def ffn_width(self) -> int:
        return self.gate.shape[0]


@dataclass(frozen=True)
class TransformerModel:
    config: ModelConfig
    embed: np.ndarray        # (vocab, dim)
    layers: tuple[TransformerLayer, ...]
    final_norm: np.ndarray   # (dim,)
    lm_head: np.ndarray      # (vocab, dim)

    def replace_layer(self, index: int, layer: TransformerLayer) -> "TransformerModel":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class ActivationBatch:
    """Activations captured at one site: (n_samples, n_tokens, features)."""

    site: str
    values: np.ndarray


@dataclass(frozen=True)
class ActivationStats:
    """Per-input-feature l2 norms collected over a calibration batch.

    by_name maps each weight-matrix name of the layer the stats were
    collected for to its x_din vector; matrices fed from the same site
    share the same vector.
    """

    by_name: dict[str, np.ndarray]
    by_site: dict[str, np.ndarray]
    sample_count: int
    position_count: int


# ---------------------------------------------------------------------------
# Building blocks


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * scale * weight


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


@lru_cache(maxsize=16)
def _rope_tables(n_pos: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = theta ** (-2.0 * np.arange(half) / head_dim)
    angles = np.outer(np.arange(n_pos, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, theta: float) -> np.ndarray:
    """Rotate consecutive component pairs of each head by position-dependent angles.

    x has shape (n_tokens, n_heads, head_dim); pair (2i, 2i+1) at
    position m is rotated by m * theta^(-2i/head_dim).
    """
    n_pos, _, head_dim = x.shape
    cos, sin = _rope_tables(n_pos, head_dim, theta)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Forward


def forward(
    model: TransformerModel,
    tokens: np.ndarray,
    capture: set[str] | frozenset[str] | None = None,
    capture_layers: set[int] | None = None,
    stop_after_layer: int | None = None,
) -> tuple[np.ndarray | None, dict[tuple[int, str], np.ndarray]]:
    """Run one token stream; returns (logits, captured activations).

    capture selects sites, capture_layers selects layers (all layers when
    None).  When stop_after_layer is given the run ends after that layer
    and logits are None.  Causal masking is always enforced.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DataError("token stream must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        bad = int(tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0])
        raise DataError(f"token id {bad} outside vocabulary [0, {cfg.vocab_size})")

    capture = frozenset(capture) if capture else frozenset()
    captured: dict[tuple[int, str], np.ndarray] = {}

    def grab(layer_idx: int, site: str, values: np.ndarray) -> None:
        if site in capture and (capture_layers is None or layer_idx in capture_layers):
            captured[(layer_idx, site)] = values.copy()

    x = model.embed[tokens]

    for i, layer in enumerate(model.layers):
        x = _layer_forward(cfg, layer, x, i, grab)
        if stop_after_layer is not None and i >= stop_after_layer:
            return None, captured

    x = rms_norm(x, model.final_norm, cfg.norm_eps)
    logits = x @ model.lm_head.T
    return logits, captured


def _layer_forward(cfg: ModelConfig, layer: TransformerLayer, x: np.ndarray, idx: int, grab) -> np.ndarray:
    n_pos = x.shape[0]
    d_h = cfg.head_dim
    n_heads = layer.n_heads(cfg)

    h = rms_norm(x, layer.attn_norm, cfg.norm_eps)
    grab(idx, SITE_ATTN_INPUT, h)

    q = layer.q(h).reshape(n_pos, n_heads, d_h)
    k = layer.k(h).reshape(n_pos, n_heads, d_h)
    v = layer.v(h).reshape(n_pos, n_heads, d_h)
    q = apply_rope(q, cfg.rope_theta)
    k = apply_rope(k, cfg.rope_theta)

    scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(d_h)
    causal = np.tril(np.ones((n_pos, n_pos), dtype=bool))
    scores = np.where(causal[None, :, :], scores, -np.inf)
    probs = _softmax_rows(scores)
    context = np.einsum("hqk,khd->qhd", probs, v).reshape(n_pos, n_heads * d_h)
    grab(idx, SITE_ATTN_O_INPUT, context)
    x = x + layer.o(context)

    h2 = rms_norm(x, layer.ffn_norm, cfg.norm_eps)
    grab(idx, SITE_FFN_INPUT, h2)
    inter = silu(layer.gate(h2)) * layer.up(h2)
    grab(idx, SITE_FFN_DOWN_INPUT, inter)
    return x + layer.down(inter)


def capture_batches(
    model: TransformerModel, streams: list[np.ndarray], layer: int
) -> dict[str, ActivationBatch]:
    """Stack the four per-site captures of one layer across equal-length samples."""
    per_site: dict[str, list[np.ndarray]] = {s: [] for s in ALL_SITES}
    for stream in streams:
        _, caps = forward(model, stream, capture=set(ALL_SITES), capture_layers={layer}, stop_after_layer=layer)
        for site in ALL_SITES:
            per_site[site].append(caps[(layer, site)])
    return {site: ActivationBatch(site=site, values=np.stack(vals)) for site, vals in per_site.items()}


# ---------------------------------------------------------------------------
# Calibration statistics


_SITE_FOR_PROJ = {
    "q_proj": SITE_ATTN_INPUT,
    "k_proj": SITE_ATTN_INPUT,
    "v_proj": SITE_ATTN_INPUT,
    "o_proj": SITE_ATTN_O_INPUT,
    "gate_proj": SITE_FFN_INPUT,
    "up_proj": SITE_FFN_INPUT,
    "down_proj": SITE_FFN_DOWN_INPUT,
}


def site_for_projection(proj: str) -> str:
    return _SITE_FOR_PROJ[proj]


def collect_stats(model: TransformerModel, calib: list[np.ndarray], layer: int) -> ActivationStats:
    """x_din vectors for one layer's four input sites.

    Layers before `layer` are forwarded as they currently are, so when
    the caller compresses layer by layer the statistics see the already
    compressed prefix.  Accumulation is sequential in sample order in
    float64, which keeps the result bit-stable and order-invariant.
    """
    if not calib:
        raise CalibrationError("calibration set is empty")
    if not 0 <= layer < len(model.layers):
        raise ValueError(f"layer index {layer} out of range")
    sq_sums: dict[str, np.ndarray] | None = None
    n_positions = 0
    for stream in calib:
        _, caps = forward(model, stream, capture=set(ALL_SITES), capture_layers={layer}, stop_after_layer=layer)
        n_positions += len(stream)
        if sq_sums is None:
            sq_sums = {site: np.zeros(caps[(layer, site)].shape[1]) for site in ALL_SITES}
        for site in ALL_SITES:
            vals = caps[(layer, site)]
            sq_sums[site] += np.einsum("lj,lj->j", vals, vals)
    by_site = {site: np.sqrt(sq) for site, sq in sq_sums.items()}
    by_name = {}
    for proj, site in _SITE_FOR_PROJ.items():
        if proj in ("gate_proj", "up_proj", "down_proj"):
            name = store.mlp_weight_name(layer, proj)
        else:
            name = store.attn_weight_name(layer, proj)
        by_name[name] = by_site[site]
    return ActivationStats(
        by_name=by_name, by_site=by_site, sample_count=len(calib), position_count=n_positions
    )


def collect_stats_all_layers(model: TransformerModel, calib: list[np.ndarray]) -> dict[int, ActivationStats]:
    """Stats for every layer from a single pass per sample (no compression
    in between, so propagation through the prefix is the identity run)."""
    if not calib:
        raise CalibrationError("calibration set is empty")
    n_layers = len(model.layers)
    sq_sums: dict[tuple[int, str], np.ndarray] = {}
    n_positions = 0
    for stream in calib:
        _, caps = forward(model, stream, capture=set(ALL_SITES))
        n_positions += len(stream)
        for key, vals in caps.items():
            acc = sq_sums.get(key)
            contrib = np.einsum("lj,lj->j", vals, vals)
            sq_sums[key] = contrib if acc is None else acc + contrib
    out: dict[int, ActivationStats] = {}
    for layer in range(n_layers):
        by_site = {site: np.sqrt(sq_sums[(layer, site)]) for site in ALL_SITES}
        by_name = {}
        for proj, site in _SITE_FOR_PROJ.items():
            if proj in ("gate_proj", "up_proj", "down_proj"):
                name = store.mlp_weight_name(layer, proj)
            else:
                name = store.attn_weight_name(layer, proj)
            by_name[name] = by_site[site]
        out[layer] = ActivationStats(
            by_name=by_name, by_site=by_site, sample_count=len(calib), position_count=n_positions
        )
    return out


# ---------------------------------------------------------------------------
# Evaluation and accounting


def perplexity(model: TransformerModel, stream: np.ndarray, seq_len: int) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of seq_len.

    Window w feeds tokens [w*S, w*S + S) and is scored against targets
    [w*S + 1, w*S + S], so every token after the first of each window is
    predicted exactly once; the final partial window is discarded.
    """
    stream = np.asarray(stream)
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if stream.size < seq_len + 1:
        raise DataError(f"evaluation stream too short: {stream.size} tokens < seq_len + 1 = {seq_len + 1}")
    n_windows = (stream.size - 1) // seq_len
    total_nll = 0.0
    total_tokens = 0
    for w in range(n_windows):
        ctx = stream[w * seq_len : (w + 1) * seq_len]
        targets = stream[w * seq_len + 1 : (w + 1) * seq_len + 1]
        logits, _ = forward(model, ctx)
        logp = _log_softmax(logits)
        total_nll -= float(logp[np.arange(seq_len), targets].sum())
        total_tokens += seq_len
    return float(np.exp(total_nll / total_tokens))


def count_params_macs(model: TransformerModel, seq_len: int) -> tuple[int, int]:
    """Stored parameter count and multiply-accumulates for one sequence.

    MACs cover all matrix products: the seven projections per layer, the
    attention score and value products, and the LM head.  Normalization,
    rotary rotation and the elementwise gate are not matrix products and
    are excluded.
    """
    cfg = model.config
    params = int(model.embed.size + model.lm_head.size + model.final_norm.size)
    macs = seq_len * int(model.lm_head.size)
    for layer in model.layers:
        params += int(layer.attn_norm.size + layer.ffn_norm.size)
        for proj in (layer.q, layer.k, layer.v, layer.o, layer.gate, layer.up, layer.down):
            params += proj.n_params
            macs += seq_len * proj.macs_per_position
        macs += 2 * seq_len * seq_len * cfg.head_dim * layer.n_heads(cfg)
    return params, macs


# ---------------------------------------------------------------------------
# Tokenization


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Map each byte to its own id (vocab 256); reversible."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize_bytes(stream: np.ndarray) -> bytes:
    stream = np.asarray(stream)
    if stream.size and (stream.min() < 0 or stream.max() > 255):
        raise DataError("stream contains ids outside the byte range")
    return stream.astype(np.uint8).tobytes()


def read_token_file(path: str | Path, fmt: str = "bytes") -> np.ndarray:
    """Load tokens: raw text for the byte tokenizer, or little-endian u32 ids."""
    raw = Path(path).read_bytes()
    if fmt == "bytes":
        return tokenize_bytes(raw)
    if fmt == "u32":
        if len(raw) % 4:
            raise DataError(f"{path}: u32 token file length {len(raw)} is not a multiple of 4")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    raise ValueError(f"unknown token format {fmt!r}")


# ---------------------------------------------------------------------------
# Materialization to/from tensor maps


def model_from_weight_map(config: ModelConfig, weights: dict[str, store.WeightMatrix]) -> TransformerModel:
    """Assemble a dense model from a loaded checkpoint."""
    layers = []
    for i in range(config.n_layers):
        layers.append(
            TransformerLayer(
                attn_norm=weights[store.attn_norm_name(i)].data,
                q=Dense(weights[store.attn_weight_name(i, "q_proj")].data),
                k=Dense(weights[store.attn_weight_name(i, "k_proj")].data),
                v=Dense(weights[store.attn_weight_name(i, "v_proj")].data),
                o=Dense(weights[store.attn_weight_name(i, "o_proj")].data),
                ffn_norm=weights[store.ffn_norm_name(i)].data,
                gate=Dense(weights[store.mlp_weight_name(i, "gate_proj")].data),
                up=Dense(weights[store.mlp_weight_name(i, "up_proj")].data),
                down=Dense(weights[store.mlp_weight_name(i, "down_proj")].data),
            )
        )
    return TransformerModel(
        config=config,
        embed=weights[store.EMBED_NAME].data,
        layers=tuple(layers),
        final_norm=weights[store.FINAL_NORM_NAME].data,
        lm_head=weights[store.HEAD_NAME].data,
    )


def load_dense_model(path: str | Path, config: ModelConfig) -> TransformerModel:
    return model_from_weight_map(config, store.load_model(path, config))


def model_to_tensors(model: TransformerModel, dtype: str = "float32") -> dict[str, np.ndarray]:
    """Serialize a model to a {name: array} map ready for the container.

    Factored matrices become name.L / name.R, pruned FFNs are stored at
    their reduced shapes next to an integer retained-channel tensor, and
    head-pruned attention records its kept head indices.
    """
    f = np.float32 if dtype == "float32" else np.float64
    out: dict[str, np.ndarray] = {
        store.EMBED_NAME: model.embed.astype(f),
        store.HEAD_NAME: model.lm_head.astype(f),
        store.FINAL_NORM_NAME: model.final_norm.astype(f),
    }

    def put(name: str, proj: LinearMap) -> None:
        if isinstance(proj, Dense):
            out[name] = proj.w.astype(f)
        else:
            lname, rname = store.factor_names(name)
            out[lname] = proj.l.astype(f)
            out[rname] = proj.r.astype(f)

    for i, layer in enumerate(model.layers):
        out[store.attn_norm_name(i)] = layer.attn_norm.astype(f)
        out[store.ffn_norm_name(i)] = layer.ffn_norm.astype(f)
        for proj_name, proj in zip(store.ATTN_PROJS, (layer.q, layer.k, layer.v, layer.o)):
            put(store.attn_weight_name(i, proj_name), proj)
        for proj_name, proj in zip(store.FFN_PROJS, (layer.gate, layer.up, layer.down)):
            put(store.mlp_weight_name(i, proj_name), proj)
        if layer.retained_channels is not None:
            out[store.retained_channels_name(i)] = np.asarray(layer.retained_channels, dtype=np.int32)
        if layer.kept_heads is not None:
            out[store.kept_heads_name(i)] = np.asarray(layer.kept_heads, dtype=np.int32)
    return out


def model_from_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> TransformerModel:
    """Rebuild a (possibly compressed) model from a tensor map.

    The scheme of each matrix is inferred from which names are present:
    name.weight means dense, name.L/name.R means factored.
    """

    def pick(name: str) -> LinearMap:
        if name in tensors:
            return Dense(np.asarray(tensors[name], dtype=np.float64))
        lname, rname = store.factor_names(name)
        if lname in tensors and rname in tensors:
            return Factored(
                l=np.asarray(tensors[lname], dtype=np.float64),
                r=np.asarray(tensors[rname], dtype=np.float64),
            )
        raise ShapeMismatchError(f"no dense or factored tensors found for {name!r}")

    layers = []
    for i in range(config.n_layers):
        kept_heads = None
        if store.kept_heads_name(i) in tensors:
            kept_heads = tuple(int(h) for h in tensors[store.kept_heads_name(i)])
        retained = None
        if store.retained_channels_name(i) in tensors:
            retained = np.asarray(tensors[store.retained_channels_name(i)], dtype=np.int64)
        layers.append(
            TransformerLayer(
                attn_norm=np.asarray(tensors[store.attn_norm_name(i)], dtype=np.float64),
                q=pick(store.attn_weight_name(i, "q_proj")),
                k=pick(store.attn_weight_name(i, "k_proj")),
                v=pick(store.attn_weight_name(i, "v_proj")),
                o=pick(store.attn_weight_name(i, "o_proj")),
                ffn_norm=np.asarray(tensors[store.ffn_norm_name(i)], dtype=np.float64),
                gate=pick(store.mlp_weight_name(i, "gate_proj")),
                up=pick(store.mlp_weight_name(i, "up_proj")),
                down=pick(store.mlp_weight_name(i, "down_proj")),
                kept_heads=kept_heads,
                retained_channels=retained,
            )
        )
    return TransformerModel(
        config=config,
        embed=np.asarray(tensors[store.EMBED_NAME], dtype=np.float64),
        layers=tuple(layers),
        final_norm=np.asarray(tensors[store.FINAL_NORM_NAME], dtype=np.float64),
        lm_head=np.asarray(tensors[store.HEAD_NAME], dtype=np.float64),
    )
