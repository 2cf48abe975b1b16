"""Parameter sweeps over the saliency pipeline, laid out as result tables.

Four sweeps are supported:

* ``space_softmax``: 6 rows, (cross_attention, value, output) x (off, on)
* ``ca_sa``: 4 rows, concept attention over neither / self / cross / both
* ``layers``: one row per single layer, then one row for all layers
* ``timesteps``: one row per requested timestep

Every cell reruns saliency and metrics on all scenes with the other
parameters held fixed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .conceptattn import ConceptVocabulary, aggregate_layers, build_stack, forward_with_concepts
from .mmdit import MMDiTWeights
from .numerics import Rng
from .segeval import MetricsReport, SegmentationSample, evaluate_multiclass, evaluate_single_object

SWEEPS = ("space_softmax", "ca_sa", "layers", "timesteps")
SPACE_SOFTMAX_ROWS = tuple((s, f) for s in ("cross_attention", "value", "output") for f in (False, True))
# (cross attention, self attention) -> concept attention mode
CA_SA_ROWS = (
    ((False, False), "none"),
    ((False, True), "sa"),
    ((True, False), "ca"),
    ((True, True), "ca+sa"),
)
DEFAULT_STEPS = (0, 250, 500, 750, 1000)


@dataclass
class Scene:
    """One image with its prompt, concepts and ground truth."""

    id: str
    tokens: tuple[str, ...]
    x0: np.ndarray
    vocab: ConceptVocabulary
    gt: np.ndarray
    target: str | None = None
    label_map: dict | None = None
    seed: int = 0


@dataclass
class AblationRow:
    params: dict
    report: MetricsReport


@dataclass
class AblationGrid:
    sweep: str
    columns: tuple[str, ...]
    rows: list[AblationRow] = field(default_factory=list)
    protocol: str = "single"

    def table(self) -> list[dict]:
        out = []
        for row in self.rows:
            rec = {c: row.params[c] for c in self.columns}
            rec.update(acc=row.report.acc, miou=row.report.miou)
            if self.protocol == "single":
                rec["map"] = row.report.map
            out.append(rec)
        return out

    def to_csv(self) -> str:
        metrics = ("acc", "miou", "map") if self.protocol == "single" else ("acc", "miou")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(self.columns) + list(metrics))
        for rec in self.table():
            cells = [_cell(rec[c]) for c in self.columns]
            cells += ["" if rec[m] is None else repr(float(rec[m])) for m in metrics]
            writer.writerow(cells)
        return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (list, tuple)):
        return " ".join(str(i) for i in v)
    return str(v)


def _evaluate(scene_maps, protocol: str) -> MetricsReport:
    samples = [
        SegmentationSample(s.id, smap, smap.concepts, s.gt, target=s.target, label_map=s.label_map)
        for s, smap in scene_maps
    ]
    background = sorted({c for s, _ in scene_maps for c in s.vocab.background})
    if protocol == "single":
        return evaluate_single_object(samples, background)
    return evaluate_multiclass(samples, background)


def _traces(scene: Scene, weights: MMDiTWeights, t, mode):
    return forward_with_concepts(scene.tokens, scene.x0, t, weights, scene.vocab, Rng(scene.seed), mode)


def _smap(scene, weights, traces, ctraces, space, softmax, head_agg, layers, mode):
    stack = build_stack(traces, ctraces, space, softmax, head_agg, weights.config, scene.vocab.concepts,
                        config_hash=weights.config.hash(), attention=mode)
    return aggregate_layers(stack, layers)


def run_ablation(sweep: str, scenes, weights: MMDiTWeights, *, space: str = "output",
                 softmax: bool = True, head_agg: str = "concat", layers=None, timestep: float = 0,
                 mode: str = "ca+sa", protocol: str = "single", steps=None) -> AblationGrid:
    """Sweep one axis; all other parameters stay at the given values.

    ``steps`` lists the timesteps for the ``timesteps`` sweep and the layer
    indices for the ``layers`` sweep (default: every layer).
    """
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")
    if protocol not in ("single", "multi"):
        raise ValueError(f"protocol must be 'single' or 'multi', got {protocol!r}")
    scenes = list(scenes)
    if not scenes:
        raise ValueError("ablation needs at least one scene")
    n_layers = weights.config.n_layers

    def cell(params, t=timestep, attn=mode, cached=None):
        pairs = []
        for i, s in enumerate(scenes):
            traces, ctraces = cached[i] if cached else _traces(s, weights, t, attn)
            subset = params.get("layers", layers)
            smap = _smap(s, weights, traces, ctraces, params.get("space", space),
                         params.get("softmax", softmax), head_agg,
                         None if subset == "all" else subset, attn)
            pairs.append((s, smap))
        return AblationRow(params, _evaluate(pairs, protocol))

    if sweep == "space_softmax":
        grid = AblationGrid(sweep, ("space", "softmax"), protocol=protocol)
        cached = [_traces(s, weights, timestep, mode) for s in scenes]
        for sp, sm in SPACE_SOFTMAX_ROWS:
            grid.rows.append(cell({"space": sp, "softmax": sm}, cached=cached))
    elif sweep == "ca_sa":
        grid = AblationGrid(sweep, ("ca", "sa"), protocol=protocol)
        for (ca, sa), attn in CA_SA_ROWS:
            grid.rows.append(cell({"ca": ca, "sa": sa}, attn=attn))
    elif sweep == "layers":
        grid = AblationGrid(sweep, ("layers",), protocol=protocol)
        picks = list(range(n_layers)) if steps is None else [int(i) for i in steps]
        bad = [i for i in picks if not 0 <= i < n_layers]
        if bad:
            raise ValueError(f"layers {bad} outside 0..{n_layers - 1}")
        cached = [_traces(s, weights, timestep, mode) for s in scenes]
        for i in picks:
            grid.rows.append(cell({"layers": [i]}, cached=cached))
        grid.rows.append(cell({"layers": "all"}, cached=cached))
    else:
        grid = AblationGrid(sweep, ("timestep",), protocol=protocol)
        picks = DEFAULT_STEPS if steps is None else tuple(steps)
        bad = [t for t in picks if not 0 <= t <= weights.config.timesteps]
        if bad:
            raise ValueError(f"timesteps {bad} outside 0..{weights.config.timesteps}")
        for t in picks:
            grid.rows.append(cell({"timestep": t}, t=t))
    return grid


def planted_scenes(weights: MMDiTWeights, n: int, sigma: float, seed: int = 0,
                   protocol: str = "single") -> list[Scene]:
    """``n`` planted scenes with seeds ``seed .. seed+n-1``.

    Single-object scenes plant one target (alternating between the default
    targets) so the ground truth is binary; multi-class scenes plant all.
    """
    from .planted import DEFAULT_TARGETS, planted_scene

    out = []
    for k in range(n):
        targets = (DEFAULT_TARGETS[k % len(DEFAULT_TARGETS)],) if protocol == "single" else DEFAULT_TARGETS
        ps = planted_scene(weights, sigma, seed + k, targets=targets)
        out.append(Scene(ps.id, ps.tokens, ps.x0, ps.vocab, ps.gt, ps.target, ps.label_map, seed + k))
    return out
