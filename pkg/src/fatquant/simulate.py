"""Simulated quantized network: forward and STE backward.

The rounded forward carries integer codes through the same canonical integer
semantics the int8 engine executes (see intops), plus float shadows of every
pre-quantization value for gradient computation. The surrogate forward is the
round-free version of the same network, used to verify gradients by finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend, intops
from . import layers as L
from . import quant
from .errors import MissingSiteParams, UnsupportedKind
from .model import Graph
from .tensor import INT32_MAX

PW_LO, PW_HI = 0.75, 1.25


@dataclass
class PointwiseScales:
    """Per-element multiplicative factors for weights and biases, trainable
    within [0.75, 1.25] (stored raw, evaluated clipped)."""

    weight: dict[str, np.ndarray] = field(default_factory=dict)
    bias: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init_for(cls, g: Graph) -> "PointwiseScales":
        ps = cls()
        for lay in g.layers:
            if lay.kind in L.WEIGHTED:
                ps.weight[lay.id] = np.ones_like(lay.weights)
                if lay.bias is not None:
                    ps.bias[lay.id] = np.ones_like(lay.bias)
        return ps

    def clipped(self, table: dict[str, np.ndarray], layer_id: str):
        raw = table.get(layer_id)
        return None if raw is None else np.clip(raw, PW_LO, PW_HI)


@dataclass
class Trace:
    """Per-site records from a simulated forward pass.

    sites[site] has "pre" (float value entering the site's quantizer),
    "post" (the fake-quant value consumers see) and "codes" (integer codes;
    None in surrogate mode)."""

    sites: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)
    logits: np.ndarray | None = None


def _act_consts(p: quant.QuantParams) -> tuple[float, int, int, int]:
    s, zp = quant.scale_zero_point(p)
    qmin, qmax = p.qrange()
    return float(s[0]), int(zp[0]), qmin, qmax


class QuantizedNet:
    """Executable fake-quant view of a float graph."""

    def __init__(
        self,
        g: Graph,
        params: dict[str, quant.QuantParams],
        scales: PointwiseScales | None = None,
        surrogate: bool = False,
    ):
        g.validate()
        if any(lay.kind == L.BATCH_NORM for lay in g.layers):
            raise ValueError("fold batch norm before quantization")
        self.g = g
        self.params = params
        self.scales = scales
        self.surrogate = surrogate
        needed = [g.input_id] + [lay.id for lay in g.layers if lay.kind != L.SOFTMAX]
        needed += [quant.weight_site(lay.id) for lay in g.layers if lay.kind in L.WEIGHTED]
        missing = [s for s in needed if s not in params]
        if missing:
            raise MissingSiteParams(f"no quantization params for sites {missing}")

    # -- forward ------------------------------------------------------------

    def _site_record(self, site: str, pre: np.ndarray) -> dict:
        p = self.params[site]
        if self.surrogate:
            return {"pre": pre, "post": quant.surrogate_forward(pre, p), "codes": None}
        codes = quant.quantize_tensor(pre, p)
        return {"pre": pre, "post": quant.dequantize(codes, p), "codes": codes}

    def _effective_wb(self, lay: L.LayerSpec):
        w_eff, b_eff = lay.weights, lay.bias
        if self.scales is not None:
            cw = self.scales.clipped(self.scales.weight, lay.id)
            if cw is not None:
                w_eff = w_eff * cw
            cb = self.scales.clipped(self.scales.bias, lay.id)
            if b_eff is not None and cb is not None:
                b_eff = b_eff * cb
        return w_eff, b_eff

    def _conv_like(self, lay: L.LayerSpec, rec_in: dict, trace: Trace) -> dict:
        p_in = self.params[lay.inputs[0]]
        p_out = self.params[lay.id]
        p_w = self.params[quant.weight_site(lay.id)]
        w_eff, b_eff = self._effective_wb(lay)
        s_w = quant._scale(p_w)[0]
        s_in = float(quant._scale(p_in)[0][0])
        aux = {"w_eff": w_eff, "b_eff": b_eff, "s_in": s_in, "s_w": s_w}
        n_out = w_eff.shape[0]
        sw_full = s_w if s_w.shape[0] == n_out else np.full(n_out, s_w[0])

        if b_eff is not None:
            aux["bias_mask"] = (np.abs(s_in * sw_full * b_eff) <= INT32_MAX)

        if self.surrogate:
            w_hat = quant.surrogate_forward(w_eff, p_w)
            xs = rec_in["post"]
            if lay.kind == L.CONV2D:
                y = backend.conv2d_fwd(xs, w_hat, lay.stride, lay.pad)
            elif lay.kind == L.DWSCONV2D:
                y = backend.dwconv2d_fwd(xs, w_hat, lay.stride, lay.pad)
            else:
                y = xs.reshape(xs.shape[0], -1) @ w_hat.T
            if b_eff is not None:
                b_hat = np.clip(s_in * sw_full * b_eff, -INT32_MAX, INT32_MAX) / (s_in * sw_full)
                y = y + (b_hat[None, :, None, None] if y.ndim == 4 else b_hat[None, :])
            aux["w_hat"] = w_hat
            trace.aux[lay.id] = aux
            return self._site_record(lay.id, y)

        q_w = quant.quantize_tensor(w_eff, p_w)
        aux["w_hat"] = quant.dequantize(q_w, p_w)
        s_out, zp_out, qmin, qmax = _act_consts(p_out)
        zp_in = int(quant.scale_zero_point(p_in)[1][0])
        d = rec_in["codes"] - zp_in
        if lay.kind == L.CONV2D:
            acc = backend.conv2d_int(d, q_w, lay.stride, lay.pad)
        elif lay.kind == L.DWSCONV2D:
            acc = backend.dwconv2d_int(d, q_w, lay.stride, lay.pad)
        else:
            acc = intops.int_fc(d, q_w)
        if b_eff is not None:
            b_q = quant.quantize_bias(b_eff, s_in, sw_full)
            acc = acc + (b_q[None, :, None, None] if acc.ndim == 4 else b_q[None, :])
        intops.check_acc(acc, lay.id)
        deq = 1.0 / (s_in * sw_full)
        mult = s_out / (s_in * sw_full)
        if acc.ndim == 4:
            deq, mult = deq[None, :, None, None], mult[None, :, None, None]
        else:
            deq, mult = deq[None, :], mult[None, :]
        codes = intops.requantize(acc, mult, zp_out, qmin, qmax)
        pre = acc.astype(np.float64) * deq
        trace.aux[lay.id] = aux
        return {"pre": pre, "post": quant.dequantize(codes, p_out), "codes": codes}

    def _elementwise(self, lay: L.LayerSpec, recs: list[dict]) -> dict:
        pre = L.forward(lay, [r["post"] for r in recs])
        if self.surrogate:
            return self._site_record(lay.id, pre)

        p_out = self.params[lay.id]
        s_out, zp_out, qmin, qmax = _act_consts(p_out)
        consts = []
        for ref, rec in zip(lay.inputs, recs):
            p_in = self.params[ref]
            s_in, zp_in = _act_consts(p_in)[:2]
            consts.append((rec["codes"] - zp_in, s_in))

        d, s_in = consts[0]
        if lay.kind == L.RELU:
            codes = intops.int_relu(d, s_out / s_in, zp_out, qmin, qmax)
        elif lay.kind == L.RELU6:
            codes = intops.int_relu6(d, s_out / s_in, s_out, zp_out, qmin, qmax)
        elif lay.kind == L.AVG_POOL:
            k, stride = L.pool_window_stride(lay)
            codes = intops.int_avgpool(d, k, stride, s_out / (s_in * k * k),
                                       zp_out, qmin, qmax)
        elif lay.kind == L.ADD:
            d2, s_in2 = consts[1]
            codes = intops.int_add(d, s_out / s_in, d2, s_out / s_in2,
                                   zp_out, qmin, qmax)
        else:
            raise UnsupportedKind(lay.kind)
        return {"pre": pre, "post": quant.dequantize(codes, p_out), "codes": codes}

    def forward(self, x: np.ndarray) -> Trace:
        trace = Trace()
        x = np.asarray(x, dtype=np.float64)
        trace.sites[self.g.input_id] = self._site_record(self.g.input_id, x)
        for lay in self.g.layers:
            recs = [trace.sites[r] for r in lay.inputs]
            if lay.kind in L.WEIGHTED:
                trace.sites[lay.id] = self._conv_like(lay, recs[0], trace)
            elif lay.kind == L.SOFTMAX:
                probs = L.forward(lay, [recs[0]["post"]])
                trace.sites[lay.id] = {"pre": None, "post": probs, "codes": None}
            else:
                trace.sites[lay.id] = self._elementwise(lay, recs)
        trace.logits = trace.sites[self.g.output_id]["post"]
        return trace

    # -- backward -----------------------------------------------------------

    def backward(self, trace: Trace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every trainable, given the loss
        gradient at the (dequantized) output logits."""
        g = self.g
        gpost: dict[str, np.ndarray] = {g.output_id: np.asarray(grad_logits, np.float64)}
        grads: dict[str, np.ndarray] = {}

        def add(key: str, val) -> None:
            if val is None:
                return
            grads[key] = grads[key] + val if key in grads else val

        rounded = not self.surrogate

        def add_site_grads(site: str, gy: np.ndarray) -> np.ndarray:
            gx, ga, gt, gr = quant.ste_backward(gy, trace.sites[site]["pre"],
                                                self.params[site], rounded=rounded)
            add(f"alpha:{site}", ga)
            add(f"alpha_t:{site}", gt)
            add(f"alpha_r:{site}", gr)
            return gx

        for lay in reversed(g.layers):
            gy_post = gpost.pop(lay.id, None)
            if gy_post is None:
                continue
            if lay.kind == L.SOFTMAX:
                raise UnsupportedKind("cannot train through a Softmax output")
            g_pre = add_site_grads(lay.id, gy_post)
            x_post = trace.sites[lay.inputs[0]]["post"]

            if lay.kind in L.WEIGHTED:
                aux = trace.aux[lay.id]
                w_hat = aux["w_hat"]
                if lay.kind == L.CONV2D:
                    gx, gw = backend.conv2d_bwd(x_post, w_hat, g_pre, lay.stride, lay.pad)
                    gb = g_pre.sum(axis=(0, 2, 3))
                elif lay.kind == L.DWSCONV2D:
                    gx, gw = backend.dwconv2d_bwd(x_post, w_hat, g_pre, lay.stride, lay.pad)
                    gb = g_pre.sum(axis=(0, 2, 3))
                else:
                    x2 = x_post.reshape(x_post.shape[0], -1)
                    gx = (g_pre @ w_hat).reshape(x_post.shape)
                    gw = g_pre.T @ x2
                    gb = g_pre.sum(axis=0)

                p_w = self.params[quant.weight_site(lay.id)]
                gw_eff, gaw, _, _ = quant.ste_backward(gw, aux["w_eff"], p_w,
                                                       rounded=rounded)
                add(f"alpha:{quant.weight_site(lay.id)}", gaw)
                if self.scales is not None and lay.id in self.scales.weight:
                    raw = self.scales.weight[lay.id]
                    mask = (raw >= PW_LO) & (raw <= PW_HI)
                    add(f"pw:{lay.id}", gw_eff * lay.weights * mask)
                if (aux["b_eff"] is not None and self.scales is not None
                        and lay.id in self.scales.bias):
                    raw = self.scales.bias[lay.id]
                    mask = (raw >= PW_LO) & (raw <= PW_HI)
                    add(f"pb:{lay.id}", gb * aux["bias_mask"] * lay.bias * mask)
                gpost[lay.inputs[0]] = gpost.get(lay.inputs[0], 0) + gx
            else:
                xs = [trace.sites[r]["post"] for r in lay.inputs]
                gxs, _, _ = L.backward(lay, xs, g_pre)
                for ref, gx in zip(lay.inputs, gxs):
                    gpost[ref] = gpost.get(ref, 0) + gx

        g_in = gpost.pop(g.input_id, None)
        if g_in is not None:
            add_site_grads(g.input_id, g_in)
        return grads
