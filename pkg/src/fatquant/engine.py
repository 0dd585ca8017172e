"""Integer inference engine: compile, run, and the FATQ binary format.

The compiled model stores int8 weights, int32 biases and float64
requantization multipliers. Execution uses int32-checked integer
accumulators and the canonical requantization from intops, so its per-site
codes equal the fake-quant simulation's codes exactly.

Binary layout: magic "FATQ", u32 version, u32 manifest length, manifest JSON
(UTF-8), zero padding to an 8-byte boundary, then the blobs back to back
(each 8-byte aligned; i8 weights, i32 biases, f64 multipliers/scales).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, intops
from . import layers as L
from . import quant
from .errors import BadVersion, Corrupt, MissingSiteParams
from .model import Graph
from .simulate import PointwiseScales
from .tensor import round_half_away

MAGIC = b"FATQ"
FORMAT_VERSION = 1

_BLOB_DTYPES = {"i8": "<i1", "i32": "<i4", "f64": "<f8"}


@dataclass
class QuantizedModel:
    """Compiled integer model mirroring the source graph topology."""

    input_q: dict                       # scale/zp/qmin/qmax of the input site
    layers: list[dict] = field(default_factory=list)
    input_id: str = "input"
    output_id: str = ""
    config_hash: str = ""


def _site_consts(p: quant.QuantParams) -> dict:
    s, zp = quant.scale_zero_point(p)
    qmin, qmax = p.qrange()
    return {"scale": float(s[0]), "zp": int(zp[0]), "qmin": qmin, "qmax": qmax}


def compile_model(
    g: Graph,
    params: dict[str, quant.QuantParams],
    scales: PointwiseScales | None = None,
    config_hash: str = "",
) -> QuantizedModel:
    """Quantize weights/biases and bake requantization constants per layer."""
    g.validate()
    if any(lay.kind == L.BATCH_NORM for lay in g.layers):
        raise ValueError("fold batch norm before compiling")

    def site(ref: str) -> quant.QuantParams:
        if ref not in params:
            raise MissingSiteParams(f"no quantization params for site {ref!r}")
        return params[ref]

    qm = QuantizedModel(input_q=_site_consts(site(g.input_id)),
                        input_id=g.input_id, output_id=g.output_id,
                        config_hash=config_hash)
    for lay in g.layers:
        desc: dict = {"id": lay.id, "kind": lay.kind, "inputs": list(lay.inputs)}
        if lay.kind == L.SOFTMAX:
            desc["in_q"] = _site_consts(site(lay.inputs[0]))
            qm.layers.append(desc)
            continue

        p_out = site(lay.id)
        out_q = _site_consts(p_out)
        desc["out_q"] = out_q
        p_in = site(lay.inputs[0])
        in_q = _site_consts(p_in)
        desc["zp_in"] = in_q["zp"]

        if lay.kind in L.WEIGHTED:
            p_w = site(quant.weight_site(lay.id))
            w_eff, b_eff = lay.weights, lay.bias
            if scales is not None:
                cw = scales.clipped(scales.weight, lay.id)
                if cw is not None:
                    w_eff = w_eff * cw
                cb = scales.clipped(scales.bias, lay.id)
                if b_eff is not None and cb is not None:
                    b_eff = b_eff * cb
            w_q = quant.quantize_tensor(w_eff, p_w)
            assert int(np.abs(w_q).max(initial=0)) <= 127
            s_w = quant._scale(p_w)[0]
            n_out = w_eff.shape[0]
            sw_full = s_w if s_w.shape[0] == n_out else np.full(n_out, s_w[0])
            if b_eff is not None:
                b_q = quant.quantize_bias(b_eff, in_q["scale"], sw_full)
            else:
                b_q = np.zeros(n_out, dtype=np.int64)
            desc["weights"] = w_q.astype(np.int8)
            desc["bias"] = b_q.astype(np.int32)
            desc["mult"] = out_q["scale"] / (in_q["scale"] * sw_full)
            desc["stride"] = lay.stride
            desc["pad"] = lay.pad
        elif lay.kind in (L.RELU, L.RELU6):
            desc["m"] = out_q["scale"] / in_q["scale"]
        elif lay.kind == L.AVG_POOL:
            k, stride = L.pool_window_stride(lay)
            desc["window"] = k
            desc["stride"] = stride
            desc["m"] = out_q["scale"] / (in_q["scale"] * k * k)
        elif lay.kind == L.ADD:
            in2_q = _site_consts(site(lay.inputs[1]))
            desc["zp_in2"] = in2_q["zp"]
            desc["m"] = out_q["scale"] / in_q["scale"]
            desc["m2"] = out_q["scale"] / in2_q["scale"]
        else:
            raise ValueError(f"cannot compile layer kind {lay.kind!r}")
        qm.layers.append(desc)
    return qm


def quantize_input(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    c = qm.input_q
    q = round_half_away(c["scale"] * np.asarray(x, dtype=np.float64)) + c["zp"]
    return np.clip(q, c["qmin"], c["qmax"]).astype(np.int64)


def run_int8(qm: QuantizedModel, x: np.ndarray, want_trace: bool = False):
    """Integer forward pass; returns float logits (and per-site codes)."""
    codes: dict[str, np.ndarray] = {qm.input_id: quantize_input(qm, x)}
    out_consts: dict[str, dict] = {qm.input_id: qm.input_q}
    result = None

    for desc in qm.layers:
        kind = desc["kind"]
        if kind == L.SOFTMAX:
            c = desc["in_q"]
            logits = (codes[desc["inputs"][0]].astype(np.float64) - c["zp"]) / c["scale"]
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            result = e / e.sum(axis=1, keepdims=True)
            continue

        oq = desc["out_q"]
        d = codes[desc["inputs"][0]] - desc["zp_in"]
        if kind in L.WEIGHTED:
            w_q = desc["weights"].astype(np.int32)
            if kind == L.CONV2D:
                acc = backend.conv2d_int(d, w_q, desc["stride"], desc["pad"])
            elif kind == L.DWSCONV2D:
                acc = backend.dwconv2d_int(d, w_q, desc["stride"], desc["pad"])
            else:
                acc = intops.int_fc(d, w_q)
            b_q = desc["bias"].astype(np.int64)
            acc = acc + (b_q[None, :, None, None] if acc.ndim == 4 else b_q[None, :])
            intops.check_acc(acc, desc["id"])
            mult = desc["mult"]
            mult = mult[None, :, None, None] if acc.ndim == 4 else mult[None, :]
            q = intops.requantize(acc, mult, oq["zp"], oq["qmin"], oq["qmax"])
        elif kind == L.RELU:
            q = intops.int_relu(d, desc["m"], oq["zp"], oq["qmin"], oq["qmax"])
        elif kind == L.RELU6:
            q = intops.int_relu6(d, desc["m"], oq["scale"], oq["zp"],
                                 oq["qmin"], oq["qmax"])
        elif kind == L.AVG_POOL:
            q = intops.int_avgpool(d, desc["window"], desc["stride"], desc["m"],
                                   oq["zp"], oq["qmin"], oq["qmax"])
        elif kind == L.ADD:
            d2 = codes[desc["inputs"][1]] - desc["zp_in2"]
            q = intops.int_add(d, desc["m"], d2, desc["m2"],
                               oq["zp"], oq["qmin"], oq["qmax"])
        else:
            raise ValueError(f"cannot execute layer kind {kind!r}")
        codes[desc["id"]] = q
        out_consts[desc["id"]] = oq

    if result is None:
        c = out_consts[qm.output_id]
        result = (codes[qm.output_id].astype(np.float64) - c["zp"]) / c["scale"]
    if want_trace:
        return result, codes
    return result


# ---------------------------------------------------------------------------
# FATQ binary format


def export_model(qm: QuantizedModel) -> bytes:
    blobs: list[bytes] = []
    blob_table: list[dict] = []
    offset = 0

    def put(arr: np.ndarray, tag: str) -> int:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_BLOB_DTYPES[tag]).tobytes()
        pad = (-len(raw)) % 8
        blob_table.append({"dtype": tag, "shape": list(arr.shape),
                           "offset": offset, "size": len(raw)})
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
        return len(blob_table) - 1

    layers_doc = []
    for desc in qm.layers:
        entry = {k: v for k, v in desc.items()
                 if k not in ("weights", "bias", "mult")}
        if "weights" in desc:
            entry["weights"] = put(desc["weights"], "i8")
            entry["bias"] = put(desc["bias"], "i32")
            entry["mult"] = put(desc["mult"], "f64")
        layers_doc.append(entry)

    manifest = {
        "config_hash": qm.config_hash,
        "input_id": qm.input_id,
        "output_id": qm.output_id,
        "input_q": qm.input_q,
        "layers": layers_doc,
        "blobs": blob_table,
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    head = MAGIC + FORMAT_VERSION.to_bytes(4, "little") + len(mjson).to_bytes(4, "little")
    pad = (-(len(head) + len(mjson))) % 8
    return head + mjson + b"\0" * pad + b"".join(blobs)


def import_model(data: bytes) -> QuantizedModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise Corrupt("not a FATQ stream")
    version = int.from_bytes(data[4:8], "little")
    if version != FORMAT_VERSION:
        raise BadVersion(f"unsupported FATQ version {version}")
    mlen = int.from_bytes(data[8:12], "little")
    if len(data) < 12 + mlen:
        raise Corrupt("truncated manifest")
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Corrupt(f"bad manifest: {exc}") from exc
    body_start = 12 + mlen + ((-(12 + mlen)) % 8)

    def get(idx: int) -> np.ndarray:
        try:
            b = manifest["blobs"][idx]
        except (IndexError, KeyError, TypeError) as exc:
            raise Corrupt(f"bad blob reference {idx}") from exc
        start = body_start + b["offset"]
        end = start + b["size"]
        if end > len(data):
            raise Corrupt("truncated blob section")
        arr = np.frombuffer(data[start:end], dtype=_BLOB_DTYPES[b["dtype"]])
        return arr.reshape(b["shape"]).copy()

    try:
        layers_doc = manifest["layers"]
        qm = QuantizedModel(input_q=manifest["input_q"],
                            input_id=manifest["input_id"],
                            output_id=manifest["output_id"],
                            config_hash=manifest["config_hash"])
    except KeyError as exc:
        raise Corrupt(f"manifest missing field {exc}") from exc
    for entry in layers_doc:
        desc = dict(entry)
        if "weights" in desc:
            desc["weights"] = get(desc["weights"]).astype(np.int8)
            desc["bias"] = get(desc["bias"]).astype(np.int32)
            desc["mult"] = get(desc["mult"]).astype(np.float64)
        qm.layers.append(desc)
    return qm


def save_fatq(qm: QuantizedModel, path: str | Path) -> None:
    Path(path).write_bytes(export_model(qm))


def load_fatq(path: str | Path) -> QuantizedModel:
    return import_model(Path(path).read_bytes())
