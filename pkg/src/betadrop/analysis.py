"""Threshold pruning, FLOPs/memory accounting, runtime gate statistics, and
class-level gate correlation analysis.

FLOPs are multiply-accumulates only (dense: in*out; conv:
C_out*C_in*k^2*H_out*W_out); biases and activations are excluded, and memory
counts weight entries under the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ContractError, PruneCollapseError
from .gates import MODE_DBB
from .layers import Network, _conv_spatial, forward_eval

DEFAULT_PRUNE_THRESHOLD = 1e-3

# Correlations that cannot be computed (a zero-variance class average) are
# recorded as this sentinel instead of propagating NaN.
UNDEFINED_CORR = -2.0


def prune_by_threshold(net: Network, threshold: float = DEFAULT_PRUNE_THRESHOLD):
    """Keep sets per gated layer: unit k survives iff E_q[pi_k] >= threshold.

    Uses the input-independent expected keep probability for both gate modes,
    so units pruned in stage 1 can never revive in stage 2.
    """
    keeps = []
    for li, gate in net.gated_layers():
        keep = np.flatnonzero(gate.expected_pi() >= threshold)
        if keep.size == 0:
            raise PruneCollapseError(
                f"threshold {threshold} prunes every unit of layer {li}"
            )
        keeps.append(keep)
    return keeps


@dataclass
class LayerCost:
    kind: str
    in_units: int
    out_units: int
    in_gate: int | None
    out_gate: int | None
    mac_per_pair: int  # k^2 * H_out * W_out for conv, 1 for dense
    weights_per_pair: int  # k^2 for conv, 1 for dense


def layer_costs(net: Network) -> list[LayerCost]:
    """Cost descriptors linking each layer's in/out extents to gate indices."""
    gate_index = {li: gi for gi, (li, _) in enumerate(net.gated_layers())}
    spatial = _conv_spatial(net)
    shape = net.meta.get("input_shape")
    costs: list[LayerCost] = []
    prev_conv_gate: int | None = None
    h = w = None
    if shape and len(shape) == 3:
        h, w = int(shape[1]), int(shape[2])
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv":
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            costs.append(
                LayerCost(
                    "conv",
                    layer.in_channels,
                    layer.out_channels,
                    prev_conv_gate,
                    gate_index.get(i),
                    layer.kernel**2 * ho * wo,
                    layer.kernel**2,
                )
            )
            prev_conv_gate = gate_index.get(i)
            h, w = spatial[i]
        else:
            out_gate = None
            if i + 1 < len(net.layers):
                nxt = net.layers[i + 1]
                if nxt.kind == "dense":
                    out_gate = gate_index.get(i + 1)
            costs.append(
                LayerCost(
                    "dense", layer.in_dim, layer.out_dim,
                    gate_index.get(i), out_gate, 1, 1,
                )
            )
    return costs


def _accumulate(costs: list[LayerCost], counts, per_pair_attr: str) -> int:
    total = 0
    for c in costs:
        n_in = c.in_units if c.in_gate is None or counts is None else int(counts[c.in_gate])
        n_out = c.out_units if c.out_gate is None or counts is None else int(counts[c.out_gate])
        total += n_in * n_out * getattr(c, per_pair_attr)
    return total


def count_flops(net: Network, keep_counts=None) -> tuple[int, int, float]:
    """(original, pruned, speedup) multiply-accumulate counts.

    ``keep_counts`` holds one surviving-unit count per gated layer; omit it
    for the unpruned count (speedup 1.0).
    """
    costs = layer_costs(net)
    if keep_counts is not None and len(keep_counts) != len(net.gated_layers()):
        raise ContractError(
            f"{len(keep_counts)} keep counts for {len(net.gated_layers())} gates"
        )
    orig = _accumulate(costs, None, "mac_per_pair")
    pruned = _accumulate(costs, keep_counts, "mac_per_pair")
    return orig, pruned, orig / pruned


def count_memory(net: Network, keep_counts=None) -> float:
    """Surviving weight count as a percentage of the original (biases excluded)."""
    costs = layer_costs(net)
    orig = _accumulate(costs, None, "weights_per_pair")
    pruned = _accumulate(costs, keep_counts, "weights_per_pair")
    return 100.0 * pruned / orig


@dataclass
class RuntimeStats:
    """Per-input runtime pruning statistics for an input-dependent network."""

    kept_per_input: np.ndarray  # (N, G) per-input surviving-unit counts
    mean_kept: np.ndarray  # (G,) running average over the inputs
    flops_per_input: np.ndarray  # (N,)
    mean_flops: float
    static_flops: int  # the network as-is, no runtime pruning


def runtime_prune_stats(net: Network, dataset: Dataset,
                        threshold: float = DEFAULT_PRUNE_THRESHOLD,
                        batch_size: int = 500) -> RuntimeStats:
    """Count, per test input, the units whose expected mask clears ``threshold``.

    Per-input FLOPs use the same accounting as :func:`count_flops` with that
    input's per-gate counts.
    """
    gates = net.gates()
    if not gates:
        raise ContractError("runtime statistics require gated layers")
    if any(g.mode != MODE_DBB for g in gates):
        raise ContractError("runtime statistics require DBB-mode gates")
    counts = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        _, info = forward_eval(net, x, return_gate_info=True)
        counts.append(
            np.stack([(mask >= threshold).sum(axis=1) for _, mask in info], axis=1)
        )
    kept = np.concatenate(counts, axis=0)
    costs = layer_costs(net)
    flops = np.array(
        [_accumulate(costs, row, "mac_per_pair") for row in kept], dtype=np.float64
    )
    static = _accumulate(costs, None, "mac_per_pair")
    return RuntimeStats(
        kept_per_input=kept,
        mean_kept=kept.mean(axis=0),
        flops_per_input=flops,
        mean_flops=float(flops.mean()),
        static_flops=static,
    )


@dataclass
class CorrelationReport:
    """Per gated layer, Pearson correlations between class-average gate vectors."""

    layer_indices: list[int]
    matrices: list[np.ndarray]  # each (C, C); UNDEFINED_CORR marks undefined entries
    class_means: list[np.ndarray] = field(default_factory=list)  # each (C, K)


def _gate_vectors(net: Network, dataset: Dataset, batch_size: int = 500) -> list[np.ndarray]:
    """Per gated layer, the (N, K) matrix of per-input expected masks."""
    per_layer: list[list[np.ndarray]] = [[] for _ in net.gates()]
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        _, info = forward_eval(net, x, return_gate_info=True)
        for gi, (_, mask) in enumerate(info):
            per_layer[gi].append(mask)
    return [np.concatenate(chunks, axis=0) for chunks in per_layer]


def class_average_gate_correlation(net: Network, dataset: Dataset) -> CorrelationReport:
    """Correlate the per-class averages of the gate activations phi(x)."""
    classes = np.unique(dataset.labels)
    if any((dataset.labels == c).sum() < 2 for c in classes):
        raise ContractError("correlation analysis needs >= 2 examples per class")
    vectors = _gate_vectors(net, dataset)
    layer_indices = [li for li, _ in net.gated_layers()]
    matrices = []
    means = []
    for mat in vectors:
        class_mean = np.stack(
            [mat[dataset.labels == c].mean(axis=0) for c in classes]
        )
        means.append(class_mean)
        c = len(classes)
        corr = np.full((c, c), UNDEFINED_CORR)
        centered = class_mean - class_mean.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(centered, axis=1)
        for a in range(c):
            corr[a, a] = 1.0
            for b in range(a + 1, c):
                if norms[a] > 0.0 and norms[b] > 0.0:
                    r = float(centered[a] @ centered[b] / (norms[a] * norms[b]))
                    corr[a, b] = corr[b, a] = min(1.0, max(-1.0, r))
        matrices.append(corr)
    return CorrelationReport(layer_indices, matrices, means)


def within_cross_gate_correlation(net: Network, dataset: Dataset, layer: int = -1,
                                  max_pairs: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Mean Pearson correlation of per-input gate vectors for same-class vs
    different-class input pairs at one gated layer (default: the last)."""
    from .distributions import make_rng

    mat = _gate_vectors(net, dataset)[layer]
    labels = dataset.labels
    centered = mat - mat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    ok = norms > 0.0
    rng = make_rng(seed)
    n = mat.shape[0]
    within, cross = [], []
    for _ in range(max_pairs):
        i, j = rng.integers(0, n, size=2)
        if i == j or not (ok[i] and ok[j]):
            continue
        r = float(centered[i] @ centered[j] / (norms[i] * norms[j]))
        (within if labels[i] == labels[j] else cross).append(r)
    if not within or not cross:
        raise ContractError("not enough valid pairs to estimate correlations")
    return float(np.mean(within)), float(np.mean(cross))
