"""Fully connected layers and layer-addressable weight containers."""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad

ACTIVATIONS: dict[str, Callable] = {
    "swish": ad.swish,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "elu": ad.elu,
    "identity": ad.identity,
}

WEIGHTS_FORMAT = "metassm.weights/1"


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "swish"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    def to_dict(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "activation": self.activation}


def mlp_specs(in_dim: int, hidden: Sequence[int], out_dim: int, activation: str,
              out_activation: str = "identity") -> list[LayerSpec]:
    dims = [in_dim, *hidden, out_dim]
    specs = [LayerSpec(a, b, activation) for a, b in zip(dims[:-2], dims[1:-1])]
    specs.append(LayerSpec(dims[-2], dims[-1], out_activation))
    return specs


class WeightSet(Mapping):
    """Ordered mapping ``layer path -> (weight matrix, bias vector)``.

    Paths look like ``encoder.0`` or ``conic.fc``; the part before the last
    dot names the subnetwork. Entries may be plain arrays or tape tensors.
    A WeightSet is never mutated; every update returns a new one.
    """

    def __init__(self, layers: Mapping[str, tuple] | Iterable[tuple[str, tuple]]):
        items = layers.items() if isinstance(layers, Mapping) else layers
        self._layers: dict[str, tuple] = {}
        for path, (W, b) in items:
            if path in self._layers:
                raise ValueError(f"duplicate layer path {path!r}")
            self._layers[path] = (W, b)

    def __getitem__(self, path):
        return self._layers[path]

    def __iter__(self):
        return iter(self._layers)

    def __len__(self):
        return len(self._layers)

    def __repr__(self):
        shapes = ", ".join(f"{p}:{tuple(ad.value_of(W).shape)}" for p, (W, _) in self._layers.items())
        return f"WeightSet({shapes})"

    @property
    def paths(self) -> list[str]:
        return list(self._layers)

    def subnet(self, name: str) -> list[tuple]:
        """Layers of subnetwork ``name`` in order."""
        prefix = name + "."
        return [wb for p, wb in self._layers.items() if p.startswith(prefix)]

    def subnet_paths(self, name: str) -> list[str]:
        prefix = name + "."
        return [p for p in self._layers if p.startswith(prefix)]

    def replace(self, updates: Mapping[str, tuple]) -> "WeightSet":
        unknown = set(updates) - set(self._layers)
        if unknown:
            raise KeyError(f"unknown layer paths {sorted(unknown)}")
        return WeightSet((p, updates.get(p, wb)) for p, wb in self._layers.items())

    def detach(self) -> "WeightSet":
        """Copy with tapes stripped (plain arrays)."""
        return WeightSet((p, (ad.value_of(W), ad.value_of(b))) for p, (W, b) in self._layers.items())

    def variables(self, tape: ad.Tape, paths: Iterable[str] | None = None) -> "WeightSet":
        """Copy where the selected layers become variables on ``tape``."""
        chosen = set(self._layers) if paths is None else set(paths)
        out = []
        for p, (W, b) in self._layers.items():
            if p in chosen:
                W = tape.variable(ad.value_of(W), name=p + ".W")
                b = tape.variable(ad.value_of(b), name=p + ".b")
            out.append((p, (W, b)))
        return WeightSet(out)

    def tensors(self, paths: Iterable[str] | None = None) -> list:
        """Flat list ``[W0, b0, W1, b1, ...]`` for the selected layers."""
        chosen = self.paths if paths is None else [p for p in self._layers if p in set(paths)]
        flat = []
        for p in chosen:
            flat.extend(self._layers[p])
        return flat

    def with_tensors(self, paths: Sequence[str], flat: Sequence) -> "WeightSet":
        updates = {p: (flat[2 * i], flat[2 * i + 1]) for i, p in enumerate(paths)}
        return self.replace(updates)

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in self._layers.values():
            parts.append(np.ravel(ad.value_of(W)))
            parts.append(np.ravel(ad.value_of(b)))
        return np.concatenate(parts) if parts else np.zeros(0)

    def from_flat(self, vec: np.ndarray) -> "WeightSet":
        out, k = [], 0
        for p, (W, b) in self._layers.items():
            ws, bs = np.shape(ad.value_of(W)), np.shape(ad.value_of(b))
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            out.append((p, (vec[k:k + nw].reshape(ws).copy(), vec[k + nw:k + nw + nb].reshape(bs).copy())))
            k += nw + nb
        if k != len(vec):
            raise ValueError(f"flat vector has {len(vec)} entries, expected {k}")
        return WeightSet(out)

    def same_structure(self, other: "WeightSet") -> bool:
        if self.paths != other.paths:
            return False
        return all(np.shape(ad.value_of(a[0])) == np.shape(ad.value_of(b[0]))
                   and np.shape(ad.value_of(a[1])) == np.shape(ad.value_of(b[1]))
                   for a, b in zip(self._layers.values(), other._layers.values()))

    def check_chain(self):
        """Verify consecutive layers in each subnetwork have matching dims."""
        groups: dict[str, list[tuple[str, tuple]]] = {}
        for p, wb in self._layers.items():
            groups.setdefault(p.rsplit(".", 1)[0], []).append((p, wb))
        for name, layers in groups.items():
            for (p0, (W0, _)), (p1, (W1, _)) in zip(layers, layers[1:]):
                if np.shape(ad.value_of(W0))[0] != np.shape(ad.value_of(W1))[1]:
                    raise ValueError(f"{p0} -> {p1}: output dim does not match next input dim")

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float64 LE blob)."""
        path = Path(path)
        manifest_path = path.with_suffix(".json")
        blob_path = path.with_suffix(".bin")
        layers, offset = [], 0
        for p, (W, b) in self._layers.items():
            ws, bs = list(np.shape(ad.value_of(W))), list(np.shape(ad.value_of(b)))
            layers.append({"path": p, "weight_shape": ws, "bias_shape": bs, "offset": offset})
            offset += int(np.prod(ws)) + int(np.prod(bs))
        manifest = {"format": WEIGHTS_FORMAT, "dtype": "<f8", "count": offset,
                    "blob": blob_path.name, "layers": layers}
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        blob_path.write_bytes(self.flat().astype("<f8").tobytes())
        return manifest_path, blob_path

    @classmethod
    def load(cls, path: str | Path) -> "WeightSet":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"{path}: not a weight manifest")
        blob = np.frombuffer(path.with_name(manifest["blob"]).read_bytes(), dtype="<f8")
        if blob.size != manifest["count"]:
            raise ValueError(f"{path}: blob holds {blob.size} values, manifest says {manifest['count']}")
        out = []
        for entry in manifest["layers"]:
            k = entry["offset"]
            nw = int(np.prod(entry["weight_shape"]))
            nb = int(np.prod(entry["bias_shape"]))
            W = blob[k:k + nw].reshape(entry["weight_shape"]).astype(np.float64)
            b = blob[k + nw:k + nw + nb].reshape(entry["bias_shape"]).astype(np.float64)
            out.append((entry["path"], (W, b)))
        return cls(out)


def init_weights(specs, seed: int) -> WeightSet:
    """Glorot-uniform weights and zero biases.

    ``specs`` is either a list of :class:`LayerSpec` (paths ``layer.0``,
    ``layer.1``, ...) or a mapping ``subnet name -> list of LayerSpec``.
    """
    if isinstance(specs, Mapping):
        named = [(f"{name}.{i}", s) for name, layer_specs in specs.items() for i, s in enumerate(layer_specs)]
    else:
        named = [(f"layer.{i}", s) for i, s in enumerate(specs)]
    if not named:
        raise ValueError("init_weights needs at least one layer")
    rng = np.random.default_rng(seed)
    layers = []
    for path, s in named:
        limit = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        layers.append((path, (rng.uniform(-limit, limit, size=(s.out_dim, s.in_dim)), np.zeros(s.out_dim))))
    ws = WeightSet(layers)
    ws.check_chain()
    return ws


def dense(x, W, b, activation="identity"):
    return ACTIVATIONS[activation](ad.linear(x, W, b))


def mlp_forward(layers: Sequence[tuple], specs: Sequence[LayerSpec], x):
    """Apply a chain of dense layers; ``x`` is ``(n_in,)`` or ``(batch, n_in)``."""
    if len(layers) != len(specs):
        raise ValueError(f"{len(layers)} weight pairs for {len(specs)} layer specs")
    if np.shape(ad.value_of(x))[-1] != specs[0].in_dim:
        raise ad.ShapeError(f"mlp input has {np.shape(ad.value_of(x))[-1]} features, "
                            f"first layer expects {specs[0].in_dim}")
    h = x
    for (W, b), spec in zip(layers, specs):
        h = dense(h, W, b, spec.activation)
    return h


def axpy(dst: WeightSet, a: float, src: WeightSet) -> WeightSet:
    """Return ``dst + a * src`` layer by layer."""
    if not dst.same_structure(src):
        raise ValueError("axpy: weight sets differ in layer paths or shapes")
    return WeightSet((p, (W + a * src[p][0], b + a * src[p][1])) for p, (W, b) in dst.items())


def parse_mask(text: str | Iterable[str] | None, paths: Sequence[str]) -> list[str]:
    """Resolve a comma-separated list of layer paths / glob patterns.

    ``"encoder.4,encoder.5,transition.*,decoder.*"`` selects those layers in
    model order. Patterns that match nothing raise ``ValueError``.
    """
    if text is None:
        return list(paths)
    patterns = [t.strip() for t in text.split(",")] if isinstance(text, str) else list(text)
    patterns = [p for p in patterns if p]
    chosen = set()
    for pat in patterns:
        hits = fnmatch.filter(paths, pat)
        if not hits:
            raise ValueError(f"mask pattern {pat!r} matches no layer (have {list(paths)})")
        chosen.update(hits)
    return [p for p in paths if p in chosen]
