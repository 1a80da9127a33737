"""Declarative layer graphs: the baseline and attention-augmented detector
topologies, shape propagation, deterministic forward evaluation with
per-layer activation capture, and reverse-mode gradients from a head score
back to any recorded layer.

A graph is a list of named layers; every layer references earlier layers by
name. The two built-in topologies follow the conventional small-detector
layout: a strided-conv backbone with cross-stage blocks and a pooling
pyramid, an FPN/PAN neck, and a decoupled per-scale head stub. The improved
variant inserts a global attention block right before the pooling pyramid
and fuses the first cross-stage output (layer 2) into the neck through an
extra high-resolution scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from . import nn
from .errors import FormatError, GraphError, ShapeError
from .tensor import ShapeSpec, Tensor3, conv_output_dim

LAYER_KINDS = ("input", "conv", "c2f", "sppf", "upsample", "concat", "gam", "detect")

BACKBONE_WIDTHS = (32, 64, 128, 256, 512)
BACKBONE_DEPTHS = (1, 2, 2, 1)
DEFAULT_CATEGORIES = 16


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: Mapping[str, int] = field(default_factory=dict)
    seed: int = 0

    def param(self, key: str, default: int | None = None) -> int:
        if key in self.params:
            return self.params[key]
        if default is None:
            raise FormatError(f"layer {self.name}: missing parameter {key!r}")
        return default


@dataclass(frozen=True)
class ShapeRow:
    name: str
    kind: str
    shape: tuple[int, int, int]  # (C, H, W)
    note: str = ""

    def dims_text(self) -> str:
        c, h, w = self.shape
        return f"{h}x{w}x{c}"


@dataclass(frozen=True)
class GraphSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers or self.layers[0].kind != "input":
            raise GraphError("first layer must be the input declaration")
        seen: set[str] = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise GraphError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.name in seen:
                raise GraphError(f"duplicate layer name {layer.name!r}")
            for ref in layer.inputs:
                if ref not in seen:
                    raise GraphError(
                        f"layer {layer.name} references {ref!r} before definition"
                    )
            seen.add(layer.name)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        spec = self.layers[0]
        return (spec.param("channels"), spec.param("height"), spec.param("width"))

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError(f"no layer named {name!r}")

    def detect_layer(self) -> LayerSpec:
        detects = [l for l in self.layers if l.kind == "detect"]
        if len(detects) != 1:
            raise GraphError(f"expected exactly one detect layer, found {len(detects)}")
        return detects[0]

    def ancestors(self, name: str) -> set[str]:
        """Transitive input closure of a layer, including the layer itself."""
        target = self.layer(name)
        closure = {name}
        frontier = list(target.inputs)
        by_name = {l.name: l for l in self.layers}
        while frontier:
            current = frontier.pop()
            if current in closure:
                continue
            closure.add(current)
            frontier.extend(by_name[current].inputs)
        return closure

    def propagate_shapes(self) -> tuple[dict[str, tuple[int, int, int]], list[ShapeRow]]:
        """Walk the layer list computing (C, H, W) per layer.

        Returns the shape map plus a display table that includes detail rows
        (pyramid-pool concat width, attention in/out, per-scale head grids).
        """
        shapes: dict[str, tuple[int, int, int]] = {}
        rows: list[ShapeRow] = []
        for layer in self.layers:
            if layer.kind == "input":
                shape = (layer.param("channels"), layer.param("height"), layer.param("width"))
            elif layer.kind == "conv":
                (c, h, w) = shapes[layer.inputs[0]]
                spec = ShapeSpec(
                    layer.param("kernel", 3), layer.param("stride", 1), layer.param("padding", 1)
                )
                try:
                    shape = (layer.param("out_channels"), conv_output_dim(h, spec), conv_output_dim(w, spec))
                except ShapeError as exc:
                    raise ShapeError(f"layer {layer.name}: {exc}") from exc
            elif layer.kind == "c2f":
                (c, h, w) = shapes[layer.inputs[0]]
                out_c = layer.param("out_channels")
                if out_c % 2 != 0:
                    raise ShapeError(f"layer {layer.name}: c2f needs even channels, got {out_c}")
                shape = (out_c, h, w)
            elif layer.kind == "sppf":
                (c, h, w) = shapes[layer.inputs[0]]
                rows.append(ShapeRow(layer.name, "sppf.concat", (4 * c, h, w), "pool concat"))
                shape = (c, h, w)
            elif layer.kind == "upsample":
                (c, h, w) = shapes[layer.inputs[0]]
                f = layer.param("factor", 2)
                shape = (c, h * f, w * f)
            elif layer.kind == "concat":
                parts = [shapes[ref] for ref in layer.inputs]
                base = parts[0][1:]
                for ref, part in zip(layer.inputs, parts):
                    if part[1:] != base:
                        raise ShapeError(
                            f"layer {layer.name}: concat inputs {layer.inputs[0]} "
                            f"{base} vs {ref} {part[1:]}"
                        )
                shape = (sum(p[0] for p in parts), *base)
            elif layer.kind == "gam":
                (c, h, w) = shapes[layer.inputs[0]]
                rate = layer.param("rate", 4)
                if c % 4 != 0 or c % rate != 0:
                    raise ShapeError(
                        f"layer {layer.name}: channels {c} not divisible by 4 and rate {rate}"
                    )
                shape = (c, h, w)
            elif layer.kind == "detect":
                categories = layer.param("categories", DEFAULT_CATEGORIES)
                for i, ref in enumerate(layer.inputs):
                    (c, h, w) = shapes[ref]
                    rows.append(ShapeRow(layer.name, f"detect.box{i}", (4, h, w), f"from {ref}"))
                    rows.append(
                        ShapeRow(layer.name, f"detect.cls{i}", (categories, h, w), f"from {ref}")
                    )
                continue
            else:  # pragma: no cover - guarded by __post_init__
                raise GraphError(f"unknown kind {layer.kind}")
            shapes[layer.name] = shape
            rows.append(ShapeRow(layer.name, layer.kind, shape))
        return shapes, rows


# --- built-in topologies ------------------------------------------------------

def _layer_seed(graph_seed: int, index: int) -> int:
    return graph_seed * 1009 + index


def build_graph(
    variant: str,
    input_size: int,
    num_categories: int = DEFAULT_CATEGORIES,
    seed: int = 0,
    gam_rate: int = 4,
    depths: Sequence[int] = BACKBONE_DEPTHS,
) -> GraphSpec:
    """Construct the baseline or improved detector topology.

    ``input_size`` must be divisible by 32 (the deepest stride).
    """
    if variant not in ("baseline", "improved"):
        raise GraphError(f"unknown variant {variant!r}")
    if input_size % 32 != 0 or input_size <= 0:
        raise GraphError(f"input size {input_size} must be a positive multiple of 32")
    w = BACKBONE_WIDTHS
    d = tuple(depths)
    if len(d) != 4:
        raise GraphError("depths must list four backbone stage depths")

    layers: list[LayerSpec] = [
        LayerSpec("img", "input", (), {"channels": 3, "height": input_size, "width": input_size})
    ]
    counter = 0

    def add(kind: str, inputs: tuple[str, ...], **params: int) -> str:
        nonlocal counter
        name = f"l{counter}"
        layers.append(
            LayerSpec(name, kind, inputs, params, seed=_layer_seed(seed, counter))
        )
        counter += 1
        return name

    def conv(src: str, out_c: int) -> str:
        return add("conv", (src,), out_channels=out_c, kernel=3, stride=2, padding=1, act=1)

    # Backbone (stages P1..P5).
    p1 = conv("img", w[0])
    p2 = conv(p1, w[1])
    c2 = add("c2f", (p2,), out_channels=w[1], n=d[0])
    p3 = conv(c2, w[2])
    c4 = add("c2f", (p3,), out_channels=w[2], n=d[1])
    p4 = conv(c4, w[3])
    c6 = add("c2f", (p4,), out_channels=w[3], n=d[2])
    p5 = conv(c6, w[4])
    c8 = add("c2f", (p5,), out_channels=w[4], n=d[3])
    if variant == "improved":
        c8 = add("gam", (c8,), rate=gam_rate)
    sppf = add("sppf", (c8,), kernel=5)

    # FPN top-down path.
    up1 = add("upsample", (sppf,), factor=2)
    cat1 = add("concat", (up1, c6))
    mid_p4 = add("c2f", (cat1,), out_channels=w[3], n=1)
    up2 = add("upsample", (mid_p4,), factor=2)
    cat2 = add("concat", (up2, c4))
    mid_p3 = add("c2f", (cat2,), out_channels=w[2], n=1)

    if variant == "baseline":
        down1 = conv(mid_p3, w[2])
        cat3 = add("concat", (down1, mid_p4))
        out_p4 = add("c2f", (cat3,), out_channels=w[3], n=1)
        down2 = conv(out_p4, w[3])
        cat4 = add("concat", (down2, sppf))
        out_p5 = add("c2f", (cat4,), out_channels=w[4], n=1)
        scales = (mid_p3, out_p4, out_p5)
    else:
        # Extra high-resolution branch fusing the layer-2 features.
        up3 = add("upsample", (mid_p3,), factor=2)
        cat3 = add("concat", (up3, c2))
        out_p2 = add("c2f", (cat3,), out_channels=w[1], n=1)
        down1 = conv(out_p2, w[1])
        cat4 = add("concat", (down1, mid_p3))
        out_p3 = add("c2f", (cat4,), out_channels=w[2], n=1)
        down2 = conv(out_p3, w[2])
        cat5 = add("concat", (down2, mid_p4))
        out_p4 = add("c2f", (cat5,), out_channels=w[3], n=1)
        down3 = conv(out_p4, w[3])
        cat6 = add("concat", (down3, sppf))
        out_p5 = add("c2f", (cat6,), out_channels=w[4], n=1)
        scales = (out_p2, out_p3, out_p4, out_p5)

    layers.append(
        LayerSpec(
            f"l{counter}",
            "detect",
            scales,
            {"categories": num_categories},
            seed=_layer_seed(seed, counter),
        )
    )
    return GraphSpec(tuple(layers))


# Reference dimensions (C, H, W) for the 640-input backbone, used by the
# shape checker; the pooling pyramid widens to 4x channels before fusing.
REFERENCE_BACKBONE_640 = (
    ("l0", (32, 320, 320)),
    ("l1", (64, 160, 160)),
    ("l2", (64, 160, 160)),
    ("l3", (128, 80, 80)),
    ("l4", (128, 80, 80)),
    ("l5", (256, 40, 40)),
    ("l6", (256, 40, 40)),
    ("l7", (512, 20, 20)),
    ("l8", (512, 20, 20)),
)
REFERENCE_SPPF_CONCAT_640 = (2048, 20, 20)
REFERENCE_SPPF_OUT_640 = (512, 20, 20)
REFERENCE_GAM_640 = (512, 20, 20)


def check_reference_shapes(spec: GraphSpec, variant: str) -> list[str]:
    """Compare propagated shapes of a 640-input graph against the embedded
    reference table; returns human-readable mismatch lines (empty = pass)."""
    shapes, rows = spec.propagate_shapes()
    problems: list[str] = []

    def expect(name: str, want: tuple[int, int, int]):
        got = shapes.get(name)
        if got != want:
            problems.append(f"{name}: expected {want}, got {got}")

    for name, want in REFERENCE_BACKBONE_640:
        expect(name, want)
    sppf_rows = [r for r in rows if r.kind == "sppf.concat"]
    if not sppf_rows:
        problems.append("no pooling-pyramid concat row found")
    elif sppf_rows[0].shape != REFERENCE_SPPF_CONCAT_640:
        problems.append(
            f"sppf concat: expected {REFERENCE_SPPF_CONCAT_640}, got {sppf_rows[0].shape}"
        )
    sppf_name = next((l.name for l in spec.layers if l.kind == "sppf"), None)
    if sppf_name is not None:
        expect(sppf_name, REFERENCE_SPPF_OUT_640)
    if variant == "improved":
        gam = next((l for l in spec.layers if l.kind == "gam"), None)
        if gam is None:
            problems.append("improved variant is missing the attention layer")
        else:
            if shapes.get(gam.inputs[0]) != REFERENCE_GAM_640:
                problems.append(
                    f"gam input: expected {REFERENCE_GAM_640}, got {shapes.get(gam.inputs[0])}"
                )
            expect(gam.name, REFERENCE_GAM_640)
    return problems


# --- text serialization --------------------------------------------------------

def write_graph_text(spec: GraphSpec, stream: IO[str]) -> None:
    """One layer per line: ``name kind key=value...``; '#' starts a comment."""
    stream.write("# trapeval graph description\n")
    for layer in spec.layers:
        parts = [layer.name, layer.kind]
        if layer.inputs:
            parts.append("in=" + ",".join(layer.inputs))
        for key in sorted(layer.params):
            parts.append(f"{key}={layer.params[key]}")
        if layer.seed != 0:
            parts.append(f"seed={layer.seed}")
        stream.write(" ".join(parts) + "\n")


def parse_graph_text(stream: IO[str]) -> GraphSpec:
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise FormatError(f"line {lineno}: expected 'name kind ...', got {raw!r}")
        name, kind = tokens[0], tokens[1]
        inputs: tuple[str, ...] = ()
        params: dict[str, int] = {}
        seed = 0
        for token in tokens[2:]:
            if "=" not in token:
                raise FormatError(f"line {lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            if key == "in":
                inputs = tuple(v for v in value.split(",") if v)
            elif key == "seed":
                try:
                    seed = int(value)
                except ValueError:
                    raise FormatError(f"line {lineno}: bad seed {value!r}")
            else:
                try:
                    params[key] = int(value)
                except ValueError:
                    raise FormatError(f"line {lineno}: bad integer for {key}: {value!r}")
        layers.append(LayerSpec(name, kind, inputs, params, seed))
    try:
        return GraphSpec(tuple(layers))
    except GraphError as exc:
        raise FormatError(str(exc)) from exc


# --- instantiated graph ---------------------------------------------------------

@dataclass(frozen=True)
class HeadOutput:
    scale_index: int
    source: str
    box: np.ndarray
    cls: np.ndarray


@dataclass(frozen=True)
class GraphRun:
    """Forward results: named activations, per-layer caches for the backward
    pass, and the per-scale head outputs."""

    graph: "Graph"
    activations: Mapping[str, np.ndarray]
    caches: Mapping[str, object]
    head: tuple[HeadOutput, ...]

    def activation(self, name: str) -> Tensor3:
        if name not in self.activations:
            raise GraphError(f"no recorded activation for layer {name!r}")
        return Tensor3(self.activations[name].copy())


@dataclass(frozen=True)
class ScoreSelector:
    """Picks one scalar from the head: a category logit at a cell. With no
    explicit cell (and/or scale) the maximum logit for the category wins."""

    category: int
    scale: int | None = None
    cell: tuple[int, int] | None = None

    def resolve(self, run: "GraphRun") -> tuple[int, int, int, float]:
        head = run.head
        if not head:
            raise GraphError("graph has no head outputs")
        n_cat = head[0].cls.shape[0]
        if not 0 <= self.category < n_cat:
            raise GraphError(f"category {self.category} outside 0..{n_cat - 1}")
        scales = range(len(head)) if self.scale is None else (self.scale,)
        if self.scale is not None and not 0 <= self.scale < len(head):
            raise GraphError(f"scale {self.scale} outside 0..{len(head) - 1}")
        best: tuple[float, int, int, int] | None = None
        for si in scales:
            plane = head[si].cls[self.category]
            if self.cell is not None:
                cy, cx = self.cell
                if not (0 <= cy < plane.shape[0] and 0 <= cx < plane.shape[1]):
                    raise GraphError(f"cell {self.cell} outside head grid {plane.shape}")
                candidate = (plane[cy, cx], si, cy, cx)
            else:
                flat = int(np.argmax(plane))
                cy, cx = divmod(flat, plane.shape[1])
                candidate = (plane[cy, cx], si, cy, cx)
            if best is None or candidate[0] > best[0]:
                best = candidate
        value, si, cy, cx = best  # type: ignore[misc]
        return si, cy, cx, float(value)


class Graph:
    """A GraphSpec with weights attached: runs forward and reverse passes."""

    def __init__(self, spec: GraphSpec):
        self.spec = spec
        self.shapes, _ = spec.propagate_shapes()
        self.modules: dict[str, object] = {}
        self.detect_spec = spec.detect_layer()
        for layer in spec.layers:
            if layer.kind in ("input",):
                continue
            if layer.kind == "conv":
                c_in = self.shapes[layer.inputs[0]][0]
                self.modules[layer.name] = nn.Conv(
                    c_in,
                    layer.param("out_channels"),
                    layer.param("kernel", 3),
                    layer.param("stride", 1),
                    layer.param("padding", 1),
                    act=bool(layer.param("act", 1)),
                    seed=layer.seed,
                )
            elif layer.kind == "c2f":
                c_in = self.shapes[layer.inputs[0]][0]
                self.modules[layer.name] = nn.C2f(
                    c_in, layer.param("out_channels"), layer.param("n", 1), seed=layer.seed
                )
            elif layer.kind == "sppf":
                c_in = self.shapes[layer.inputs[0]][0]
                self.modules[layer.name] = nn.Sppf(
                    c_in, layer.param("kernel", 5), seed=layer.seed
                )
            elif layer.kind == "upsample":
                self.modules[layer.name] = nn.Upsample(layer.param("factor", 2))
            elif layer.kind == "concat":
                self.modules[layer.name] = nn.Concat()
            elif layer.kind == "gam":
                c_in = self.shapes[layer.inputs[0]][0]
                self.modules[layer.name] = nn.Gam(
                    c_in, layer.param("rate", 4), seed=layer.seed
                )
            elif layer.kind == "detect":
                rng = nn._as_rng(layer.seed)
                branches = []
                for ref in layer.inputs:
                    branches.append(
                        nn.HeadBranch(
                            self.shapes[ref][0],
                            layer.param("categories", DEFAULT_CATEGORIES),
                            seed=rng,
                        )
                    )
                self.modules[layer.name] = branches

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    def forward(
        self, image: Tensor3, overrides: Mapping[str, np.ndarray] | None = None
    ) -> GraphRun:
        if image.shape != self.input_shape:
            raise ShapeError(
                f"image shape {image.shape} != graph input {self.input_shape}"
            )
        overrides = overrides or {}
        input_name = self.spec.layers[0].name
        values: dict[str, np.ndarray] = {input_name: image.data}
        if input_name in overrides:
            values[input_name] = np.asarray(overrides[input_name], dtype=np.float64)
        caches: dict[str, object] = {}
        head: list[HeadOutput] = []
        detect_name = self.detect_spec.name
        for layer in self.spec.layers[1:]:
            module = self.modules[layer.name]
            if layer.kind == "detect":
                branch_caches = []
                for i, ref in enumerate(layer.inputs):
                    box, cls, cache = module[i].forward(values[ref])
                    for tag, arr in (("box", box), ("cls", cls)):
                        key = f"{detect_name}/{tag}{i}"
                        if key in overrides:
                            arr = np.asarray(overrides[key], dtype=np.float64)
                        if not np.isfinite(arr).all():
                            raise GraphError(f"non-finite activation in layer {key}")
                        values[key] = arr
                    branch_caches.append(cache)
                    head.append(
                        HeadOutput(i, ref, values[f"{detect_name}/box{i}"], values[f"{detect_name}/cls{i}"])
                    )
                caches[layer.name] = branch_caches
                continue
            if layer.kind == "concat":
                out, cache = module.forward([values[ref] for ref in layer.inputs])
            else:
                out, cache = module.forward(values[layer.inputs[0]])
            if out.shape != self.shapes[layer.name]:
                raise ShapeError(
                    f"layer {layer.name}: activation {out.shape} contradicts "
                    f"propagated shape {self.shapes[layer.name]}"
                )
            if layer.name in overrides:
                out = np.asarray(overrides[layer.name], dtype=np.float64)
            if not np.isfinite(out).all():
                raise GraphError(f"non-finite activation in layer {layer.name}")
            values[layer.name] = out
            caches[layer.name] = cache
        return GraphRun(self, values, caches, tuple(head))

    def backward_to_layer(
        self, run: GraphRun, selector: ScoreSelector, layer_name: str
    ) -> Tensor3:
        """Gradient of the selected head score with respect to the named
        layer's recorded activation."""
        si, cy, cx, _ = selector.resolve(run)
        return self.backward_from_head(
            run, {(si, selector.category, cy, cx): 1.0}, layer_name
        )

    def backward_from_head(
        self,
        run: GraphRun,
        seeds: Mapping[tuple[int, int, int, int], float],
        layer_name: str,
    ) -> Tensor3:
        """Gradient of a weighted sum of head category logits, keyed by
        (scale, category, cell_y, cell_x), w.r.t. a recorded activation."""
        if layer_name not in run.activations:
            raise GraphError(f"unknown layer {layer_name!r}")
        if not seeds:
            raise GraphError("no head scores selected")
        detect_name = self.detect_spec.name
        per_scale: dict[int, np.ndarray] = {}
        for (si, category, cy, cx), weight in seeds.items():
            if not 0 <= si < len(run.head):
                raise GraphError(f"scale {si} outside 0..{len(run.head) - 1}")
            seed = per_scale.setdefault(si, np.zeros_like(run.head[si].cls))
            seed[category, cy, cx] += weight

        for si, seed in per_scale.items():
            if layer_name == f"{detect_name}/cls{si}":
                if len(per_scale) > 1:
                    raise GraphError(
                        "mixed-scale seeds cannot target a single head plane"
                    )
                return Tensor3(seed)

        sources = {si: self.detect_spec.inputs[si] for si in per_scale}
        if not any(layer_name in self.spec.ancestors(src) for src in sources.values()):
            raise GraphError(
                f"layer {layer_name!r} is not an ancestor of the selected score "
                f"(scales {sorted(per_scale)} fed by {sorted(set(sources.values()))})"
            )

        grads: dict[str, np.ndarray] = {}
        for si, seed in per_scale.items():
            branch = self.modules[detect_name][si]
            branch_cache = run.caches[detect_name][si]
            upstream = branch.backward(np.zeros_like(run.head[si].box), seed, branch_cache)
            source = sources[si]
            grads[source] = grads[source] + upstream if source in grads else upstream
        for layer in reversed(self.spec.layers[1:]):
            if layer.kind == "detect" or layer.name not in grads:
                if layer.name == layer_name:
                    break
                continue
            if layer.name == layer_name:
                break
            module = self.modules[layer.name]
            upstream = module.backward(grads.pop(layer.name), run.caches[layer.name])
            if layer.kind == "concat":
                for ref, d in zip(layer.inputs, upstream):
                    grads[ref] = grads[ref] + d if ref in grads else d
            else:
                ref = layer.inputs[0]
                grads[ref] = grads[ref] + upstream if ref in grads else upstream
        if layer_name not in grads:
            raise GraphError(
                f"layer {layer_name!r} received no gradient from the selected score"
            )
        return Tensor3(grads[layer_name])


def forward(spec_or_graph: "GraphSpec | Graph", image: Tensor3) -> GraphRun:
    graph = spec_or_graph if isinstance(spec_or_graph, Graph) else Graph(spec_or_graph)
    return graph.forward(image)


def backward_to_layer(run: GraphRun, selector: ScoreSelector, layer_name: str) -> Tensor3:
    return run.graph.backward_to_layer(run, selector, layer_name)
