"""Layer-by-layer compression orchestration.

For each layer in order: collect input-norm statistics by forwarding the
calibration batch through the already-compressed prefix, factor the
attention matrices under the allocated budget, prune the FFN channel
groups, then move on - so the statistics of layer i+1 always see the
output of the compressed layer i.  The run is bit-deterministic given
(model bytes, calibration bytes, seed, plan).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import pruning, store
from .config import ModelConfig
from .errors import CalibrationError, DecompositionError, ManifestError
from .lowrank import MhaAllocation, allocate_mha, compress_mha, plain_factor
from .store import MANIFEST_VERSION, RatioPlan
from .transformer import (
    Dense,
    Factored,
    TransformerLayer,
    TransformerModel,
    collect_stats,
    count_params_macs,
    model_from_tensors,
    model_to_tensors,
    site_for_projection,
)
from .util import canonical_json, round_half_up

MHA_METHODS = ("awsvd", "svd", "head_prune")
FFN_METHODS = ("prune", "svd")


@dataclass(frozen=True)
class CompressionPlan:
    """Resolved knobs for one compression run.

    keep_ratio is the fraction of each transformer layer's parameters to
    retain; the same value drives the MHA budget and the FFN retained
    fraction for every layer (uniform-layer policy).  target_ratio_s
    records the whole-model removal fraction when the plan was derived
    from one via the ratio arithmetic.
    """

    keep_ratio: float
    alloc_ratio: tuple[float, float] = (1.0, 3.0)
    aggregation: str = "l2"
    retain_least: float = 0.01
    seed: int = 0
    calib_samples: int = 128
    calib_tokens: int = 128
    mha_method: str = "awsvd"
    ffn_method: str = "prune"
    target_ratio_s: float | None = None

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if not 0.0 <= self.retain_least < self.keep_ratio:
            raise ValueError("retain_least must lie in [0, keep_ratio)")
        if self.aggregation not in pruning.AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {pruning.AGGREGATIONS}")
        if self.mha_method not in MHA_METHODS:
            raise ValueError(f"mha_method must be one of {MHA_METHODS}")
        if self.ffn_method not in FFN_METHODS:
            raise ValueError(f"ffn_method must be one of {FFN_METHODS}")
        if self.calib_samples < 1 or self.calib_tokens < 1:
            raise ValueError("calibration sample and token counts must be >= 1")


def plan_from_ratio_s(config: ModelConfig, param_total: int, ratio_s: float, **knobs) -> CompressionPlan:
    """Derive the per-layer keep fraction from a whole-model removal target."""
    ratio_plan: RatioPlan = store.plan_ratio(config, param_total, ratio_s)
    return CompressionPlan(keep_ratio=ratio_plan.layer_keep, target_ratio_s=ratio_s, **knobs)


def sample_calibration_windows(
    stream: np.ndarray, n_samples: int, window: int, seed: int
) -> tuple[list[np.ndarray], list[int]]:
    """Seeded uniform choice of n non-overlapping windows.

    The stream is partitioned into aligned, disjoint blocks of `window`
    tokens and n of them are drawn without replacement, which guarantees
    non-overlap and reproducibility.
    """
    stream = np.asarray(stream)
    n_blocks = stream.size // window
    if n_blocks < n_samples:
        raise CalibrationError(
            f"calibration stream has {stream.size} tokens, only {n_blocks} disjoint "
            f"windows of {window}; {n_samples} requested"
        )
    rng = np.random.default_rng(seed)
    starts = sorted(int(b) * window for b in rng.choice(n_blocks, size=n_samples, replace=False))
    return [stream[s : s + window] for s in starts], starts


def _dense_weights(layer: TransformerLayer) -> dict[str, np.ndarray]:
    projs = {
        "q_proj": layer.q,
        "k_proj": layer.k,
        "v_proj": layer.v,
        "o_proj": layer.o,
        "gate_proj": layer.gate,
        "up_proj": layer.up,
        "down_proj": layer.down,
    }
    for name, proj in projs.items():
        if not isinstance(proj, Dense):
            raise ManifestError(f"layer to compress has non-dense {name}; layers are compressed once")
    return {name: proj.w for name, proj in projs.items()}


def _as_linear(weight: np.ndarray, pair) -> Dense | Factored:
    if pair is None:
        return Dense(weight)
    return Factored(l=pair.l, r=pair.r)


def compress_model(
    model: TransformerModel,
    plan: CompressionPlan,
    calib_stream: np.ndarray,
    calib_sha256: str = "",
) -> tuple[TransformerModel, dict, dict]:
    """Run the full pipeline; returns (compressed model, manifest, report)."""
    cfg = model.config
    calib, starts = sample_calibration_windows(
        calib_stream, plan.calib_samples, plan.calib_tokens, plan.seed
    )
    params_before, macs_before = count_params_macs(model, plan.calib_tokens)
    layer_params_before = sum(_layer_param_count(layer) for layer in model.layers)

    work = model
    layer_manifests: list[dict] = []
    layer_reports: list[dict] = []
    for i in range(cfg.n_layers):
        stats = collect_stats(work, calib, i)
        weights = _dense_weights(work.layers[i])
        x_by_proj = {p: stats.by_site[site_for_projection(p)] for p in weights}

        try:
            if plan.mha_method == "head_prune":
                new_layer, mha_manifest, mha_report = _compress_mha_heads(cfg, work.layers[i], weights, x_by_proj, plan)
            else:
                new_layer, mha_manifest, mha_report = _compress_mha_factored(cfg, work.layers[i], weights, x_by_proj, plan)

            if plan.ffn_method == "prune":
                new_layer, ffn_manifest, ffn_report = _compress_ffn_prune(new_layer, weights, x_by_proj, plan)
            else:
                new_layer, ffn_manifest, ffn_report = _compress_ffn_svd(cfg, new_layer, weights, plan)
        except DecompositionError as exc:
            raise DecompositionError(f"layer {i}: {exc}") from exc

        work = work.replace_layer(i, new_layer)
        layer_manifests.append({"layer": i, "keep_ratio": plan.keep_ratio, "mha": mha_manifest, "ffn": ffn_manifest})
        layer_reports.append(
            {
                "layer": i,
                "mha": mha_report,
                "mha_slack": mha_manifest.get("slack", 0),
                "ffn": ffn_report,
                "layer_params_before": _layer_param_count(model.layers[i]),
                "layer_params_after": _layer_param_count(work.layers[i]),
            }
        )

    params_after, macs_after = count_params_macs(work, plan.calib_tokens)
    layer_params_after = sum(_layer_param_count(layer) for layer in work.layers)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "global": {
            "layer_keep_ratio": plan.keep_ratio,
            "target_ratio_s": plan.target_ratio_s,
            "alloc_ratio": list(plan.alloc_ratio),
            "aggregation": plan.aggregation,
            "retain_least": plan.retain_least,
            "seed": plan.seed,
            "mha_method": plan.mha_method,
            "ffn_method": plan.ffn_method,
            "calibration": {
                "sha256": calib_sha256,
                "samples": plan.calib_samples,
                "tokens_per_sample": plan.calib_tokens,
                "window_starts": starts,
                "resampled_per_layer": False,
            },
            "params": {
                "source_total": params_before,
                "compressed_total": params_after,
                "layer_source": layer_params_before,
                "layer_retained": layer_params_after,
                "realized_ratio_s": (params_before - params_after) / params_before,
            },
        },
        "layers": layer_manifests,
    }
    report = {
        "format_version": 1,
        "layers": layer_reports,
        "params_before": params_before,
        "params_after": params_after,
        "layer_params_before": layer_params_before,
        "layer_params_after": layer_params_after,
        "layer_params_target": plan.keep_ratio * layer_params_before,
        "macs_before": macs_before,
        "macs_after": macs_after,
        "macs_seq_len": plan.calib_tokens,
        "evaluations": {},
        "timing": {},
    }
    _cross_check(report)
    return work, manifest, report


def _layer_param_count(layer: TransformerLayer) -> int:
    return sum(p.n_params for p in (layer.q, layer.k, layer.v, layer.o, layer.gate, layer.up, layer.down))


def _cross_check(report: dict) -> None:
    from_layers = sum(r["layer_params_after"] for r in report["layers"])
    if from_layers != report["layer_params_after"]:
        raise ManifestError("per-layer parameter records disagree with the global total")
    delta = report["params_before"] - report["params_after"]
    layer_delta = report["layer_params_before"] - report["layer_params_after"]
    if delta != layer_delta:
        raise ManifestError("parameter savings outside the transformer layers detected")


def _scheme_dict(alloc: MhaAllocation) -> dict[str, dict]:
    return {
        m: {"kind": s.kind, "rank": s.rank, "params": s.n_params}
        for m, s in sorted(alloc.schemes.items())
    }


def _compress_mha_factored(cfg, layer, weights, x_by_proj, plan):
    dims = {p: weights[p].shape for p in store.ATTN_PROJS}
    alloc = allocate_mha(dims, plan.keep_ratio, plan.alloc_ratio)
    pairs = compress_mha(
        {p: weights[p] for p in store.ATTN_PROJS},
        x_by_proj,
        alloc,
        use_activation_weights=plan.mha_method == "awsvd",
    )
    new_layer = replace(
        layer,
        q=_as_linear(weights["q_proj"], pairs["q_proj"]),
        k=_as_linear(weights["k_proj"], pairs["k_proj"]),
        v=_as_linear(weights["v_proj"], pairs["v_proj"]),
        o=_as_linear(weights["o_proj"], pairs["o_proj"]),
    )
    manifest = {
        "schemes": _scheme_dict(alloc),
        "kept_heads": None,
        "alloc_ratio": list(alloc.alloc_ratio),
        "budget": alloc.budget,
        "qk_budget": alloc.qk_budget,
        "vo_budget": alloc.vo_budget,
        "slack": alloc.slack,
    }
    report = {}
    for proj in store.ATTN_PROJS:
        scheme = alloc.schemes[proj]
        entry = {"kind": scheme.kind, "rank": scheme.rank, "params": scheme.n_params,
                 "dense_params": int(weights[proj].size)}
        entry["weighted_error"] = None if pairs[proj] is None else pairs[proj].weighted_error
        report[proj] = entry
    return new_layer, manifest, report


def _compress_mha_heads(cfg, layer, weights, x_by_proj, plan):
    n_heads = layer.n_heads(cfg)
    scores = pruning.head_scores(
        weights["q_proj"], weights["k_proj"], weights["v_proj"], weights["o_proj"],
        x_by_proj["q_proj"], x_by_proj["o_proj"], n_heads, cfg.head_dim, plan.aggregation,
    )
    kept = pruning.decide_head_pruning(scores, plan.keep_ratio)
    q, k, v, o = pruning.apply_head_pruning(
        weights["q_proj"], weights["k_proj"], weights["v_proj"], weights["o_proj"], kept, cfg.head_dim
    )
    new_layer = replace(layer, q=Dense(q), k=Dense(k), v=Dense(v), o=Dense(o), kept_heads=kept)
    schemes = {
        p: {"kind": "dense", "rank": None, "params": int(arr.size)}
        for p, arr in (("q_proj", q), ("k_proj", k), ("v_proj", v), ("o_proj", o))
    }
    total = sum(s["params"] for s in schemes.values())
    manifest = {
        "schemes": schemes,
        "kept_heads": [int(h) for h in kept],
        "alloc_ratio": None,
        "budget": round_half_up(plan.keep_ratio * sum(int(weights[p].size) for p in store.ATTN_PROJS)),
        "qk_budget": None,
        "vo_budget": None,
        "slack": 0,
    }
    report = {
        p: {"kind": "dense", "rank": None, "params": schemes[p]["params"],
            "dense_params": int(weights[p].size), "weighted_error": None}
        for p in store.ATTN_PROJS
    }
    report["kept_heads"] = list(manifest["kept_heads"])
    report["head_params"] = total
    return new_layer, manifest, report


def _compress_ffn_prune(layer, weights, x_by_proj, plan):
    scores = pruning.group_scores(
        weights["up_proj"], weights["gate_proj"], weights["down_proj"],
        x_by_proj["up_proj"], x_by_proj["down_proj"], plan.aggregation,
    )
    decision = pruning.decide_pruning(scores, plan.keep_ratio, plan.retain_least, plan.aggregation)
    up, gate, down = pruning.apply_pruning(
        weights["up_proj"], weights["gate_proj"], weights["down_proj"], decision
    )
    new_layer = replace(
        layer, gate=Dense(gate), up=Dense(up), down=Dense(down),
        retained_channels=decision.retained,
    )
    manifest = {
        "kind": "pruned",
        "retained_count": decision.n_retained,
        "retained_channels": [int(i) for i in decision.retained],
        "provenance": list(decision.provenance),
    }
    report = {
        "kind": "pruned",
        "retained_count": decision.n_retained,
        "bottom_count": decision.n_bottom,
        "params": int(up.size + gate.size + down.size),
        "dense_params": int(sum(weights[p].size for p in store.FFN_PROJS)),
    }
    return new_layer, manifest, report


def _compress_ffn_svd(cfg, layer, weights, plan):
    ranks = {}
    pairs = {}
    for proj in store.FFN_PROJS:
        w = weights[proj]
        d_out, d_in = w.shape
        rank = max(1, int(plan.keep_ratio * w.size / (d_out + d_in)))
        ranks[proj] = rank
        pairs[proj] = plain_factor(w, rank, name=proj)
    new_layer = replace(
        layer,
        gate=Factored(pairs["gate_proj"].l, pairs["gate_proj"].r),
        up=Factored(pairs["up_proj"].l, pairs["up_proj"].r),
        down=Factored(pairs["down_proj"].l, pairs["down_proj"].r),
    )
    manifest = {"kind": "factored", "ranks": ranks}
    report = {
        "kind": "factored",
        "ranks": dict(ranks),
        "params": sum(p.n_params for p in pairs.values()),
        "dense_params": int(sum(weights[p].size for p in store.FFN_PROJS)),
    }
    return new_layer, manifest, report


# ---------------------------------------------------------------------------
# Output plumbing


def write_outputs(out_dir: str | Path, model: TransformerModel, manifest: dict, report: dict) -> Path:
    out_dir = Path(out_dir)
    tensors = model_to_tensors(model)
    model_path = store.write_compressed(out_dir, tensors, manifest)
    (out_dir / "report.json").write_text(canonical_json(report), encoding="utf-8")
    return model_path


def load_any_model(path: str | Path, config: ModelConfig | None = None) -> tuple[TransformerModel, dict | None]:
    """Load a compressed output directory or a dense checkpoint file.

    Directories (or files with a manifest.json sibling) are self-described;
    a bare dense checkpoint needs an explicit config.
    """
    from .transformer import load_dense_model

    p = Path(path)
    manifest_sibling = (p / "manifest.json") if p.is_dir() else p.parent / "manifest.json"
    if p.is_dir() or manifest_sibling.exists():
        cfg, tensors, manifest = store.load_compressed(p)
        return model_from_tensors(cfg, tensors), manifest
    if config is None:
        raise ValueError(f"{path} is a bare checkpoint; a model config is required to load it")
    return load_dense_model(p, config), None


def record_evaluation(report_path: str | Path, data_key: str, ppl: float, wall_time_s: float) -> None:
    """Append an evaluation result to an existing run report."""
    import json

    report_path = Path(report_path)
    report = json.loads(report_path.read_text(encoding="utf-8"))
    report.setdefault("evaluations", {})[data_key] = ppl
    report.setdefault("timing", {})[data_key] = {"eval_wall_time_s": wall_time_s}
    report_path.write_text(canonical_json(report), encoding="utf-8")


def timed_perplexity(model: TransformerModel, stream: np.ndarray, seq_len: int) -> tuple[float, float]:
    from .transformer import perplexity

    t0 = time.perf_counter()
    ppl = perplexity(model, stream, seq_len)
    return ppl, time.perf_counter() - t0
