"""Model graph, on-disk manifest format, and float execution.

On disk a model is a JSON manifest plus raw little-endian float64 blobs:

    {"version": 1,
     "layers": [{"id", "kind", "params", "weights": blobfile|null,
                 "bias": blobfile|null, "inputs": [id]}],
     "input_id": "input", "output_id": "fc"}

Blob shapes are declared in each layer's params as "weight_shape" /
"bias_shape" and validated against the blob byte length. BatchNorm packs
gamma/beta/mean/var as a [4, C] weight blob with eps in params.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import BlobSizeMismatch, CyclicGraph, DanglingRef, ParseError

MANIFEST_VERSION = 1


@dataclass
class Graph:
    """Ordered, acyclic layer list with one input and one output."""

    layers: list[L.LayerSpec] = field(default_factory=list)
    input_id: str = "input"
    output_id: str = ""

    def layer_map(self) -> dict[str, L.LayerSpec]:
        return {lay.id: lay for lay in self.layers}

    def consumers(self, ref: str) -> list[L.LayerSpec]:
        return [lay for lay in self.layers if ref in lay.inputs]

    def validate(self) -> None:
        seen = {self.input_id}
        ids = set()
        for lay in self.layers:
            if lay.id in ids or lay.id == self.input_id:
                raise ParseError(f"duplicate layer id {lay.id!r}")
            if not lay.inputs:
                raise ParseError(f"layer {lay.id!r} has no inputs")
            for ref in lay.inputs:
                if ref == lay.id:
                    raise CyclicGraph(f"layer {lay.id!r} references itself")
                if ref not in seen:
                    if any(other.id == ref for other in self.layers):
                        raise CyclicGraph(
                            f"layer {lay.id!r} references {ref!r} defined later"
                        )
                    raise DanglingRef(f"layer {lay.id!r} references unknown {ref!r}")
            ids.add(lay.id)
            seen.add(lay.id)
        if self.output_id not in ids:
            raise DanglingRef(f"output id {self.output_id!r} is not a layer")
        out = self.layer_map()[self.output_id]
        if out.kind == L.SOFTMAX:
            pass  # probabilities output is allowed as the terminal layer
        for lay in self.layers:
            if lay.kind == L.SOFTMAX and lay.id != self.output_id:
                raise ParseError("Softmax is only supported as the output layer")

    def forward(self, x: np.ndarray, want_all: bool = False):
        """Float forward pass; optionally returns every layer output."""
        values: dict[str, np.ndarray] = {self.input_id: np.asarray(x, dtype=np.float64)}
        for lay in self.layers:
            values[lay.id] = L.forward(lay, [values[ref] for ref in lay.inputs])
        if want_all:
            return values[self.output_id], values
        return values[self.output_id]


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality with bit-exact weights."""
    if a.input_id != b.input_id or a.output_id != b.output_id:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.id, la.kind, la.inputs) != (lb.id, lb.kind, lb.inputs):
            return False
        if la.params != lb.params:
            return False
        for wa, wb in ((la.weights, lb.weights), (la.bias, lb.bias)):
            if (wa is None) != (wb is None):
                return False
            if wa is not None and (wa.shape != wb.shape or not np.array_equal(
                    wa.view(np.uint64), wb.view(np.uint64))):
                return False
    return True


def _write_blob(arr: np.ndarray, path: Path) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def _read_blob(path: Path, shape: list[int]) -> np.ndarray:
    if not path.is_file():
        raise DanglingRef(f"missing blob {path.name!r}")
    raw = path.read_bytes()
    expect = int(np.prod(shape)) * 8
    if len(raw) != expect:
        raise BlobSizeMismatch(
            f"blob {path.name!r} holds {len(raw)} bytes, shape {shape} needs {expect}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(g: Graph, manifest_path: str | Path) -> None:
    g.validate()
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for lay in g.layers:
        params = {k: v for k, v in lay.params.items()
                  if k not in ("weight_shape", "bias_shape")}
        entry = {"id": lay.id, "kind": lay.kind, "params": params,
                 "weights": None, "bias": None, "inputs": list(lay.inputs)}
        if lay.weights is not None:
            entry["weights"] = f"{lay.id}_w.bin"
            entry["params"]["weight_shape"] = list(lay.weights.shape)
            _write_blob(lay.weights, manifest_path.parent / entry["weights"])
        if lay.bias is not None:
            entry["bias"] = f"{lay.id}_b.bin"
            entry["params"]["bias_shape"] = list(lay.bias.shape)
            _write_blob(lay.bias, manifest_path.parent / entry["bias"])
        entries.append(entry)
    doc = {"version": MANIFEST_VERSION, "layers": entries,
           "input_id": g.input_id, "output_id": g.output_id}
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_model(manifest_path: str | Path) -> Graph:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        version = doc["version"]
        entries = doc["layers"]
        input_id = doc["input_id"]
        output_id = doc["output_id"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"manifest missing field: {exc}") from exc
    if version != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {version}")

    specs = []
    for entry in entries:
        try:
            params = dict(entry["params"])
            spec = L.LayerSpec(id=entry["id"], kind=entry["kind"], params=params,
                               inputs=list(entry["inputs"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad layer entry: {exc}") from exc
        if entry.get("weights"):
            shape = params.get("weight_shape")
            if shape is None:
                raise ParseError(f"layer {spec.id!r} has a blob but no weight_shape")
            spec.weights = _read_blob(manifest_path.parent / entry["weights"], shape)
        if entry.get("bias"):
            shape = params.get("bias_shape")
            if shape is None:
                raise ParseError(f"layer {spec.id!r} has a blob but no bias_shape")
            spec.bias = _read_blob(manifest_path.parent / entry["bias"], shape)
        specs.append(spec)

    g = Graph(layers=specs, input_id=input_id, output_id=output_id)
    g.validate()
    return g
