"""Float-to-float graph rewrites applied before quantization.

``fold_batch_norm`` merges inference-mode batch norm into the preceding
weighted layer. ``dws_rescale`` equalizes per-filter weight thresholds across
DWS -> [ReLU/ReLU6] -> Conv chains so scalar and per-channel quantization of
the rescaled weights coincide; with ReLU6 the per-channel factors are capped
so pre-activation maxima never cross the saturation constant.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .data import Dataset, iter_batches
from .errors import NoPatternFound, NonPositiveScale, OrphanBatchNorm
from .model import Graph

LOCK_LIMIT = 5.9


def _clone(g: Graph) -> Graph:
    return copy.deepcopy(g)


def fold_batch_norm(g: Graph) -> Graph:
    """Remove BatchNorm layers by folding them into their producers.

    Every BN layer must directly follow a Conv2D/DWSConv2D/FullyConnected
    layer that feeds nothing else; the rewritten graph computes the same
    function (float64 rounding aside).
    """
    g = _clone(g)
    g.validate()
    while True:
        bn = next((lay for lay in g.layers if lay.kind == L.BATCH_NORM), None)
        if bn is None:
            break
        ref = bn.inputs[0]
        producer = g.layer_map().get(ref)
        if producer is None or producer.kind not in L.WEIGHTED:
            raise OrphanBatchNorm(
                f"BatchNorm {bn.id!r} does not follow a foldable layer")
        if len(g.consumers(producer.id)) != 1:
            raise OrphanBatchNorm(
                f"cannot fold {bn.id!r}: {producer.id!r} has other consumers")

        blob = bn.weights
        eps = float(bn.params.get("eps", 1e-5))
        gamma, beta = blob[L.BN_GAMMA], blob[L.BN_BETA]
        mean, var = blob[L.BN_MEAN], blob[L.BN_VAR]
        inv = gamma / np.sqrt(var + eps)

        bshape = [1] * producer.weights.ndim
        bshape[0] = inv.shape[0]
        producer.weights = producer.weights * inv.reshape(bshape)
        shift = beta - mean * inv
        if producer.bias is not None:
            # the existing bias passes through the BN affine map as well
            producer.bias = shift + producer.bias * inv
        else:
            producer.bias = shift.copy()

        g.layers.remove(bn)
        for lay in g.layers:
            lay.inputs = [producer.id if r == bn.id else r for r in lay.inputs]
        if g.output_id == bn.id:
            g.output_id = producer.id
    g.validate()
    return g


@dataclass
class DwsRescaleReport:
    """Per-pattern scaling outcome plus skipped pattern candidates."""

    patterns: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"patterns": self.patterns, "skipped": self.skipped}


def _find_patterns(g: Graph):
    """Yield (dws, activation-or-None, conv, skip-reason-or-None) candidates."""
    for dws in g.layers:
        if dws.kind != L.DWSCONV2D:
            continue
        consumers = g.consumers(dws.id)
        if len(consumers) != 1 or dws.id == g.output_id:
            yield dws, None, None, "dws output has no single consumer"
            continue
        nxt = consumers[0]
        act = None
        if nxt.kind in (L.RELU, L.RELU6):
            act = nxt
            act_consumers = g.consumers(act.id)
            if len(act_consumers) != 1 or act.id == g.output_id:
                yield dws, act, None, "activation output has no single consumer"
                continue
            nxt = act_consumers[0]
        if nxt.kind == L.ADD:
            yield dws, act, None, "pattern touches Add"
        elif nxt.kind != L.CONV2D:
            yield dws, act, None, f"followed by {nxt.kind}, not Conv2D"
        else:
            yield dws, act, nxt, None


def dws_rescale(
    g: Graph,
    calib: Dataset,
    lock_limit: float = LOCK_LIMIT,
    sat: float = L.RELU6_SATURATION,
    batch_size: int = 64,
) -> tuple[Graph, DwsRescaleReport]:
    """Equalize per-filter weight maxima over DWS -> [act] -> Conv chains.

    For each pattern: measure per-channel pre-activation maxima over the
    calibration set; lock channels at or above ``lock_limit`` (ReLU6 only) and
    dead filters; scale the remaining filters toward the mean locked
    threshold, capped so scaled maxima stay within ``sat`` (ReLU6 only); and
    divide the following conv's matching input channels by the same factors.
    The network output on calibration data is unchanged.
    """
    g = _clone(g)
    g.validate()
    if any(lay.kind == L.BATCH_NORM for lay in g.layers):
        raise ValueError("fold batch norm before rescaling")

    candidates = list(_find_patterns(g))
    report = DwsRescaleReport()
    matches = [(d, a, c) for d, a, c, reason in candidates if reason is None]
    for d, a, c, reason in candidates:
        if reason is not None:
            report.skipped.append({"dws": d.id, "reason": reason})
    if not matches:
        raise NoPatternFound("no DWS -> [ReLU/ReLU6] -> Conv2D pattern in graph")

    # one calibration sweep collects pre-activation maxima for all patterns
    maxima = {d.id: None for d, _, _ in matches}
    for x in iter_batches(calib, batch_size):
        _, values = g.forward(x, want_all=True)
        for did in maxima:
            mx = values[did].max(axis=(0, 2, 3))
            maxima[did] = mx if maxima[did] is None else np.maximum(maxima[did], mx)

    for dws, act, conv in matches:
        x_max = maxima[dws.id]
        t_w = np.abs(dws.weights).reshape(dws.weights.shape[0], -1).max(axis=1)
        relu6 = act is not None and act.kind == L.RELU6

        dead = t_w == 0.0
        locked = dead.copy()
        if relu6:
            locked |= x_max >= lock_limit

        live_locked = locked & ~dead
        if np.any(live_locked):
            t0 = float(t_w[live_locked].mean())
        elif np.any(~dead):
            t0 = float(t_w[~dead].mean())
        else:
            report.skipped.append({"dws": dws.id, "reason": "all filters are dead"})
            continue
        if t0 <= 0.0:
            raise NonPositiveScale(f"{dws.id}: control threshold is not positive")

        s_w = np.ones_like(t_w)
        free = ~locked
        s_w[free] = t0 / t_w[free]
        if relu6:
            cap = np.where(x_max > 0.0, sat / np.where(x_max > 0.0, x_max, 1.0),
                           np.inf)
            s_w[free] = np.minimum(s_w[free], cap[free])
        if np.any(s_w <= 0.0):
            raise NonPositiveScale(f"{dws.id}: non-positive scale factor")

        dws.weights = dws.weights * s_w[:, None, None, None]
        if dws.bias is not None:
            dws.bias = dws.bias * s_w
        conv.weights = conv.weights / s_w[None, :, None, None]

        report.patterns.append({
            "dws": dws.id,
            "conv": conv.id,
            "activation": act.kind if act is not None else None,
            "scale": [float(v) for v in s_w],
            "locked": [bool(v) for v in locked],
            "t0": t0,
            "x_max": [float(v) for v in x_max],
            "t_w": [float(v) for v in t_w],
        })

    g.validate()
    return g, report
