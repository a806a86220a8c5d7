"""Masked dense/conv layers, network builders, and physical shrinking.

Dense gates mask the layer *input* units; conv gates mask the *output
channels*, shared across all spatial positions of a channel.  Training passes
build an autodiff graph with sampled relaxed masks; evaluation passes are
plain numpy with the deterministic expected masks.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .distributions import LOGIT_EPS, make_rng, open_unit_uniform
from .errors import ContractError, DimensionError, PruneCollapseError
from .gates import (
    MODE_DBB,
    GateState,
    beta_sample_node,
    concrete_mask_node,
    dbb_phi_node,
    kl_bb_node,
    kl_beta_gaussian_node,
    sample_pi_node,
)

RHO_VAR_DEFAULT = math.sqrt(5.0)


class DenseLayer:
    kind = "dense"

    def __init__(self, w, b, gate: GateState | None = None, activation: str | None = "relu",
                 input_select: np.ndarray | None = None):
        self.w = w if isinstance(w, Node) else ad.parameter(w)  # (in, out)
        self.b = b if isinstance(b, Node) else ad.parameter(b)  # (out,)
        self.gate = gate
        self.activation = activation
        self.input_select = None if input_select is None else np.asarray(input_select, dtype=np.intp)
        if gate is not None and gate.k != self.in_dim:
            raise DimensionError(
                f"gate width {gate.k} does not match dense input width {self.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.w.value.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.value.shape[1]


class ConvLayer:
    kind = "conv"

    def __init__(self, w, b, gate: GateState | None = None, activation: str | None = "relu",
                 pool: bool = True, stride: int = 1, padding: int = 0):
        self.w = w if isinstance(w, Node) else ad.parameter(w)  # (out, in, k, k)
        self.b = b if isinstance(b, Node) else ad.parameter(b)  # (out,)
        self.gate = gate
        self.activation = activation
        self.pool = pool
        self.stride = stride
        self.padding = padding
        if gate is not None and gate.k != self.out_channels:
            raise DimensionError(
                f"gate width {gate.k} does not match conv output channels {self.out_channels}"
            )

    @property
    def in_channels(self) -> int:
        return self.w.value.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.value.shape[0]

    @property
    def kernel(self) -> int:
        return self.w.value.shape[2]


class Network:
    """An ordered stack of layers plus gate bookkeeping."""

    def __init__(self, layers, gates_enabled: bool = False, meta: dict | None = None):
        self.layers = list(layers)
        self.gates_enabled = gates_enabled
        self.meta = dict(meta or {})

    def parameters(self) -> list[Node]:
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out

    def weight_nodes(self) -> list[Node]:
        return [layer.w for layer in self.layers]

    def gates(self) -> list[GateState]:
        return [layer.gate for layer in self.layers if layer.gate is not None]

    def gated_layers(self) -> list[tuple[int, GateState]]:
        return [(i, l.gate) for i, l in enumerate(self.layers) if l.gate is not None]

    def set_gate_mode(self, mode: str) -> None:
        for g in self.gates():
            g.mode = mode

    def variational_parameters(self) -> list[Node]:
        out = []
        for g in self.gates():
            out.extend(g.trainable_nodes())
        return out

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _activate(h: Node, activation: str | None) -> Node:
    if activation is None:
        return h
    if activation == "relu":
        return ad.relu(h)
    raise ContractError(f"unknown activation {activation!r}")


def _flatten_if_needed(h: Node) -> Node:
    if h.value.ndim > 2:
        return ad.reshape(h, (h.value.shape[0], -1))
    return h


def _train_mask(gate: GateState, gate_input: Node, rng, tau: float, rho_var: float,
                logit_eps: float) -> tuple[Node, Node]:
    """Sampled relaxed mask of shape (B, K) and the layer's KL node."""
    bsz = gate_input.value.shape[0]
    pi = sample_pi_node(gate, rng)
    kl = kl_bb_node(gate)
    if gate.mode == MODE_DBB:
        beta = beta_sample_node(gate, rng)
        probs = dbb_phi_node(gate, gate_input, pi, beta)
        gate.update_running_stats(gate_input.value)
        kl = ad.add(kl, kl_beta_gaussian_node(gate, rho_var))
    else:
        probs = pi
    u = open_unit_uniform(rng, (bsz, gate.k))
    return concrete_mask_node(probs, u, tau, logit_eps), kl


def _forced_mask(h: Node, forced: np.ndarray) -> Node:
    forced = np.asarray(forced, dtype=np.float64)
    if forced.shape == h.value.shape:
        return ad.mul(h, ad.constant(forced))
    return ad.mul_rowwise(h, ad.constant(forced))


def forward_train(net: Network, x: np.ndarray, rng, tau: float = 0.1,
                  rho_var: float = RHO_VAR_DEFAULT, logit_eps: float = LOGIT_EPS,
                  force_masks: dict | None = None) -> tuple[Node, list[Node]]:
    """Stochastic training pass.

    Returns the logits node and one KL node per gated layer (in layer
    order).  When the network's gates are disabled the pass is a plain
    forward and the KL list is empty.  ``force_masks`` (gate index -> mask
    array) replaces sampling for the named gates; used by equivalence tests.
    """
    x = np.asarray(x, dtype=np.float64)
    if net.layers and net.layers[0].kind == "conv" and x.ndim == 3:
        x = x[:, None, :, :]
    if net.gates_enabled and not net.gates():
        raise ContractError("gates are enabled but the network has none")
    h: Node = ad.constant(x)
    kl_terms: list[Node] = []
    gate_idx = 0
    for layer in net.layers:
        if layer.kind == "dense":
            h = _flatten_if_needed(h)
            if layer.input_select is not None:
                h = ad.gather_cols(h, layer.input_select)
            if net.gates_enabled and layer.gate is not None:
                if force_masks is not None and gate_idx in force_masks:
                    h = _forced_mask(h, force_masks[gate_idx])
                else:
                    mask, kl = _train_mask(layer.gate, h, rng, tau, rho_var, logit_eps)
                    kl_terms.append(kl)
                    h = ad.mul(mask, h)
                gate_idx += 1
            h = ad.add_rowwise(ad.matmul(h, layer.w), layer.b)
            h = _activate(h, layer.activation)
        else:
            h = ad.conv2d(h, layer.w, stride=layer.stride, padding=layer.padding)
            h = ad.add_channel_bias(h, layer.b)
            if net.gates_enabled and layer.gate is not None:
                if force_masks is not None and gate_idx in force_masks:
                    forced = np.asarray(force_masks[gate_idx], dtype=np.float64)
                    if forced.ndim == 1:
                        forced = np.broadcast_to(forced, (h.value.shape[0], forced.shape[0]))
                    h = ad.scale_channels(h, ad.constant(forced))
                else:
                    gate_input = ad.global_avg_pool(h)
                    mask, kl = _train_mask(layer.gate, gate_input, rng, tau, rho_var, logit_eps)
                    kl_terms.append(kl)
                    h = ad.scale_channels(h, mask)
                gate_idx += 1
            h = _activate(h, layer.activation)
            if layer.pool:
                h = ad.maxpool2x2(h)
    if net.gates_enabled and gate_idx != len(net.gates()):
        raise ContractError("gated forward did not visit every gate")
    return h, kl_terms


def _conv_forward_np(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
                     padding: int) -> np.ndarray:
    out = ad.conv2d(ad.constant(x), ad.constant(w), stride=stride, padding=padding)
    return out.value + b[None, :, None, None]


def _maxpool_np(x: np.ndarray) -> np.ndarray:
    return ad.maxpool2x2(ad.constant(x)).value


def forward_eval(net: Network, x: np.ndarray, return_gate_info: bool = False,
                 keep_sets=None):
    """Deterministic evaluation pass with expected masks (plain numpy).

    With ``return_gate_info`` also returns, per gated layer, the gate input
    and the applied expected mask (both per example).  ``keep_sets`` (one
    index array per gate) forces the masks of all other units to zero: the
    reference semantics that :func:`shrink` must reproduce.
    """
    h = np.asarray(x, dtype=np.float64)
    if net.layers and net.layers[0].kind == "conv" and h.ndim == 3:
        h = h[:, None, :, :]
    gate_info: list[tuple[np.ndarray, np.ndarray]] = []
    gate_idx = 0

    def apply_keep(mask, k):
        if keep_sets is None:
            return mask
        zeroed = np.zeros_like(mask)
        sel = (Ellipsis, np.asarray(keep_sets[k], dtype=np.intp))
        zeroed[sel] = np.asarray(mask)[sel]
        return zeroed

    for layer in net.layers:
        if layer.kind == "dense":
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            if layer.input_select is not None:
                h = h[:, layer.input_select]
            if net.gates_enabled and layer.gate is not None:
                gate = layer.gate
                mask = gate.expected_mask(h if gate.mode == MODE_DBB else None)
                mask = apply_keep(mask, gate_idx)
                gate_idx += 1
                if return_gate_info:
                    gate_info.append((h.copy(), np.broadcast_to(mask, h.shape).copy()))
                h = h * mask if mask.ndim == 2 else h * mask[None, :]
            h = h @ layer.w.value + layer.b.value[None, :]
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        else:
            h = _conv_forward_np(h, layer.w.value, layer.b.value, layer.stride, layer.padding)
            if net.gates_enabled and layer.gate is not None:
                gate = layer.gate
                gate_input = h.mean(axis=(2, 3))
                mask = gate.expected_mask(gate_input if gate.mode == MODE_DBB else None)
                mask = apply_keep(mask, gate_idx)
                gate_idx += 1
                if return_gate_info:
                    gate_info.append(
                        (gate_input.copy(), np.broadcast_to(mask, gate_input.shape).copy())
                    )
                mask2 = mask if mask.ndim == 2 else np.broadcast_to(mask, gate_input.shape)
                h = h * mask2[:, :, None, None]
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
            if layer.pool:
                h = _maxpool_np(h)
    if return_gate_info:
        return h, gate_info
    return h


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _init_dense(rng, fan_in: int, fan_out: int, relu_gain: bool) -> np.ndarray:
    std = math.sqrt((2.0 if relu_gain else 1.0) / fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def _init_conv(rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def _gate(k: int, alpha_over_k: float, eps: float, momentum: float, sigma_floor: float):
    return GateState.create(
        k, alpha_over_k=alpha_over_k, eps=eps, momentum=momentum, sigma_floor=sigma_floor
    )


def build_lenet_500_300(seed: int = 0, alpha_over_k: float = 1e-4, eps_gate: float = 1e-3,
                        momentum: float = 0.9, sigma_floor: float = 1e-3) -> Network:
    """784-500-300-10 dense classifier; gates on the input and both hidden inputs."""
    rng = make_rng(seed)
    dims = (784, 500, 300, 10)
    layers = []
    for i in range(3):
        fan_in, fan_out = dims[i], dims[i + 1]
        layers.append(
            DenseLayer(
                _init_dense(rng, fan_in, fan_out, relu_gain=i < 2),
                np.zeros(fan_out),
                gate=_gate(fan_in, alpha_over_k, eps_gate, momentum, sigma_floor),
                activation="relu" if i < 2 else None,
            )
        )
    return Network(layers, meta={"arch": "lenet_500_300", "input_shape": [784]})


def build_lenet5_caffe(seed: int = 0, alpha_over_k: float = 1e-4, eps_gate: float = 1e-3,
                       momentum: float = 0.9, sigma_floor: float = 1e-3) -> Network:
    """20/50-channel 5x5 conv stack + 800-500-10 dense head, gated 20-50-800-500."""
    rng = make_rng(seed)
    g = lambda k: _gate(k, alpha_over_k, eps_gate, momentum, sigma_floor)
    layers = [
        ConvLayer(_init_conv(rng, 20, 1, 5), np.zeros(20), gate=g(20), activation="relu", pool=True),
        ConvLayer(_init_conv(rng, 50, 20, 5), np.zeros(50), gate=g(50), activation="relu", pool=True),
        DenseLayer(_init_dense(rng, 800, 500, True), np.zeros(500), gate=g(800), activation="relu"),
        DenseLayer(_init_dense(rng, 500, 10, False), np.zeros(10), gate=g(500), activation=None),
    ]
    return Network(layers, meta={"arch": "lenet5_caffe", "input_shape": [1, 28, 28]})


def build_mlp(dims, seed: int = 0, gated: bool = True, alpha_over_k: float = 1e-4,
              eps_gate: float = 1e-3, momentum: float = 0.9,
              sigma_floor: float = 1e-3) -> Network:
    """Generic gated MLP for fixtures and custom runs; gates every layer input."""
    dims = tuple(int(d) for d in dims)
    rng = make_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(
            DenseLayer(
                _init_dense(rng, dims[i], dims[i + 1], relu_gain=not last),
                np.zeros(dims[i + 1]),
                gate=_gate(dims[i], alpha_over_k, eps_gate, momentum, sigma_floor)
                if gated
                else None,
                activation=None if last else "relu",
            )
        )
    return Network(layers, meta={"arch": "mlp", "dims": list(dims), "input_shape": [dims[0]]})


# ---------------------------------------------------------------------------
# physical shrinking
# ---------------------------------------------------------------------------


def _conv_spatial(net: Network) -> dict[int, tuple[int, int]]:
    """Spatial extent of each conv layer's output (after its own pooling)."""
    shape = net.meta.get("input_shape")
    out: dict[int, tuple[int, int]] = {}
    if not shape or len(shape) != 3:
        if any(l.kind == "conv" for l in net.layers):
            raise ContractError(
                "conv networks need meta['input_shape'] = [C, H, W] for "
                "spatial accounting"
            )
        return out
    h, w = int(shape[1]), int(shape[2])
    for i, layer in enumerate(net.layers):
        if layer.kind != "conv":
            break
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if layer.pool:
            h //= 2
            w //= 2
        out[i] = (h, w)
    return out


def shrink(net: Network, keep_sets, fold_masks: bool = False) -> Network:
    """Physically remove pruned units and return the smaller network.

    ``keep_sets`` holds one sorted index array per gated layer (layer
    order).  With ``fold_masks`` the input-independent expected masks of the
    surviving units are folded into the weights and the gates are dropped,
    leaving pure dense/conv arithmetic (only valid for BB-mode gates: the
    input-dependent factor of a DBB gate cannot be folded).
    """
    keeps = [np.sort(np.asarray(k, dtype=np.intp)) for k in keep_sets]
    gated = net.gated_layers()
    if len(keeps) != len(gated):
        raise ContractError(
            f"expected {len(gated)} keep sets, got {len(keeps)}"
        )
    for (li, _), keep in zip(gated, keeps):
        if keep.size == 0:
            raise PruneCollapseError(f"pruning removes every unit of layer {li}")
    if fold_masks and any(g.mode == MODE_DBB for _, g in gated):
        raise ContractError("fold_masks requires all gates in BB mode")

    keep_of_layer = {li: keep for (li, _), keep in zip(gated, keeps)}
    spatial = _conv_spatial(net)

    new_layers: list = []
    carried_channels: np.ndarray | None = None  # conv output channels kept so far
    last_conv_idx: int | None = None
    seen_dense = False
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv":
            out_keep = keep_of_layer.get(i)
            out_keep = np.arange(layer.out_channels) if out_keep is None else out_keep
            w = layer.w.value
            if carried_channels is not None:
                w = w[:, carried_channels]
            w = w[out_keep].copy()
            b = layer.b.value[out_keep].copy()
            gate = layer.gate.subset(out_keep) if layer.gate is not None else None
            if fold_masks and gate is not None:
                m = gate.expected_pi()
                w *= m[:, None, None, None]
                b *= m
                gate = None
            new_layers.append(
                ConvLayer(w, b, gate=gate, activation=layer.activation,
                          pool=layer.pool, stride=layer.stride, padding=layer.padding)
            )
            carried_channels = out_keep
            last_conv_idx = i
        else:
            own_keep = keep_of_layer.get(i)
            w = layer.w.value
            gate = layer.gate
            select = layer.input_select
            if not seen_dense and carried_channels is not None:
                # flatten boundary: positions live in (channel, y, x) flat space
                hy, wx = spatial[last_conv_idx]
                area = hy * wx
                surviving = (
                    carried_channels[:, None] * area + np.arange(area)[None, :]
                ).reshape(-1)
                new_pos = {int(old): new for new, old in enumerate(surviving)}
                positions = select if select is not None else np.arange(layer.in_dim)
                row_keep = np.arange(layer.in_dim) if own_keep is None else own_keep
                rows = row_keep[np.isin(positions[row_keep], surviving)]
                if rows.size == 0:
                    raise PruneCollapseError(f"pruning removes every input of layer {i}")
                w = w[rows].copy()
                if gate is not None:
                    gate = gate.subset(rows)
                select = np.array([new_pos[int(p)] for p in positions[rows]], dtype=np.intp)
                if select.size == surviving.size and np.array_equal(select, np.arange(select.size)):
                    select = None
                carried_channels = None
            elif own_keep is not None:
                rows = own_keep
                if select is not None:
                    select = select[rows]
                elif not seen_dense:
                    select = rows  # first layer selects from the raw input vector
                else:
                    # dense follows dense: prune the producer's columns instead
                    prev = new_layers[-1]
                    prev.w = ad.parameter(prev.w.value[:, rows].copy())
                    prev.b = ad.parameter(prev.b.value[rows].copy())
                w = w[rows].copy()
                if gate is not None:
                    gate = gate.subset(rows)
            else:
                w = w.copy()
                if gate is not None:
                    gate = gate.subset(np.arange(layer.in_dim))
            if fold_masks and gate is not None:
                w = w * gate.expected_pi()[:, None]
                gate = None
            new_layers.append(
                DenseLayer(w, layer.b.value.copy(), gate=gate,
                           activation=layer.activation, input_select=select)
            )
            seen_dense = True

    meta = dict(net.meta)
    meta["kept_counts"] = [int(k.size) for k in keeps]
    still_gated = any(l.gate is not None for l in new_layers)
    return Network(new_layers, gates_enabled=net.gates_enabled and still_gated, meta=meta)
