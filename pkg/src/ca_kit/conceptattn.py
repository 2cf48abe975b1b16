"""Concept side-stream and per-concept saliency maps.

Concept tokens are run through every MMAttn layer with the prompt stream's
parameters. Their queries attend over the image keys/values plus their own,
never the other way round, so the image and prompt streams are untouched.
Saliency is read off as dot products between image and concept vectors in
one of three spaces (cross-attention, value, attention output) and averaged
over layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mmdit import (
    LayerTrace,
    LayerWeights,
    MMDiTWeights,
    ModelConfig,
    mm_attention_layer,
    modulate,
    multi_head_attention,
    prepare_inputs,
    split_heads,
    stream_update,
)
from .numerics import Rng, as_matrix, layer_norm, matmul, row_softmax

SPACES = ("cross_attention", "value", "output")
HEAD_AGGS = ("concat", "mean")
# which key/value sets concept queries see: image (cross) and/or concepts (self)
ATTENTION_MODES = ("ca+sa", "ca", "sa", "none")
SOFTMAX_AXES = ("concepts", "pixels")


@dataclass(frozen=True)
class ConceptVocabulary:
    concepts: tuple[str, ...]
    background: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        object.__setattr__(self, "background", frozenset(self.background))
        if not self.concepts:
            raise ValueError("concept vocabulary must contain at least one concept")
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError(f"duplicate concepts in {list(self.concepts)}")
        extra = self.background - set(self.concepts)
        if extra:
            raise ValueError(f"background concepts not in vocabulary: {sorted(extra)}")

    @classmethod
    def with_background(cls, targets, background):
        """Targets first, then background concepts, all flagged accordingly."""
        targets, background = list(targets), list(background)
        return cls(tuple(targets + [b for b in background if b not in targets]), frozenset(background))

    def __len__(self):
        return len(self.concepts)

    def index(self, concept: str) -> int:
        try:
            return self.concepts.index(concept)
        except ValueError:
            raise KeyError(f"concept {concept!r} not in vocabulary") from None


@dataclass
class ConceptState:
    c: np.ndarray
    layer: int = 0


@dataclass
class ConceptTrace:
    layer: int
    n_heads: int
    mode: str
    c_in: np.ndarray
    q_c: np.ndarray
    k_c: np.ndarray
    v_c: np.ndarray
    o_c: np.ndarray
    attn: np.ndarray | None
    c_next: np.ndarray
    trace: LayerTrace = field(repr=False)

    def heads(self, name: str) -> np.ndarray:
        return split_heads(getattr(self, name), self.n_heads)


def init_concepts(vocab: ConceptVocabulary, table) -> ConceptState:
    return ConceptState(c=table.lookup(vocab.concepts), layer=0)


def _concept_matrix(c) -> np.ndarray:
    return c.c if isinstance(c, ConceptState) else as_matrix(c, "concepts")


def concept_projections(c, layer: LayerWeights, cond):
    """Queries, keys and values for the concepts from the prompt stream's weights."""
    c = _concept_matrix(c)
    d = layer.txt.q_w.shape[0]
    if c.shape[1] != d:
        raise ValueError(f"concept width {c.shape[1]} does not match d_model={d}")
    mod = layer.txt.modulation(cond)
    return layer.txt.qkv(modulate(layer_norm(c), mod["shift_attn"], mod["scale_attn"]))


def one_directional_attention(q_c, k_c, v_c, trace: LayerTrace, mode: str = "ca+sa",
                              return_probs: bool = False):
    """Concept queries over ``[image; concept]`` keys/values; prompt slots excluded.

    ``mode`` restricts the slots for ablations: ``"ca"`` image only, ``"sa"``
    concepts only, ``"none"`` skips attention and passes ``v_c`` through.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
    if q_c.shape[1] != trace.k_x.shape[1] or k_c.shape != v_c.shape:
        raise ValueError(
            f"concept projections {q_c.shape}/{k_c.shape} incompatible with image keys {trace.k_x.shape}"
        )
    if q_c.shape[1] % trace.n_heads:
        raise ValueError(f"width {q_c.shape[1]} not divisible by {trace.n_heads} heads")
    if mode == "none":
        o_c, probs = v_c.copy(), None
    else:
        keys = {"ca+sa": (trace.k_x, k_c), "ca": (trace.k_x,), "sa": (k_c,)}[mode]
        values = {"ca+sa": (trace.v_x, v_c), "ca": (trace.v_x,), "sa": (v_c,)}[mode]
        o_c, probs = multi_head_attention(q_c, np.concatenate(keys), np.concatenate(values),
                                          trace.n_heads)
    return (o_c, probs) if return_probs else o_c


def concept_residual_update(c, o_c, layer: LayerWeights, cond) -> ConceptState:
    """``c <- c + a1 (P o_c)``, then ``c <- c + a2 MLP((1 + g) lnorm(c) + b)``."""
    state = c if isinstance(c, ConceptState) else ConceptState(as_matrix(c, "concepts"), 0)
    if o_c.shape != state.c.shape:
        raise ValueError(f"o_c shape {o_c.shape} does not match concepts {state.c.shape}")
    c_next = stream_update(state.c, o_c, layer.txt, layer.txt.modulation(cond))
    return ConceptState(c=c_next, layer=state.layer + 1)


def concept_step(state: ConceptState, layer: LayerWeights, trace: LayerTrace,
                 mode: str = "ca+sa") -> tuple[ConceptState, ConceptTrace]:
    q_c, k_c, v_c = concept_projections(state, layer, trace.cond)
    o_c, probs = one_directional_attention(q_c, k_c, v_c, trace, mode, return_probs=True)
    nxt = concept_residual_update(state, o_c, layer, trace.cond)
    ctrace = ConceptTrace(
        layer=layer.index, n_heads=layer.n_heads, mode=mode, c_in=state.c,
        q_c=q_c, k_c=k_c, v_c=v_c, o_c=o_c, attn=probs, c_next=nxt.c, trace=trace,
    )
    return nxt, ctrace


def run_concept_stream(vocab: ConceptVocabulary, traces, weights: MMDiTWeights,
                       config: ModelConfig | None = None, mode: str = "ca+sa") -> list[ConceptTrace]:
    if config is not None and config != weights.config:
        raise ValueError("config does not match the weights")
    traces = list(traces)
    if [t.layer for t in traces] != list(range(len(weights.layers))):
        raise ValueError(
            f"traces must cover layers 0..{len(weights.layers) - 1} in order, "
            f"got {[t.layer for t in traces]}"
        )
    state = init_concepts(vocab, weights.embedding)
    out = []
    for layer, trace in zip(weights.layers, traces):
        state, ctrace = concept_step(state, layer, trace, mode)
        out.append(ctrace)
    return out


def forward_with_concepts(tokens, x0, t, weights: MMDiTWeights, vocab: ConceptVocabulary,
                          rng: Rng | None = None, mode: str = "ca+sa"):
    """Forward pass with the concept stream advanced inside the same layer loop."""
    x, p, cond = prepare_inputs(tokens, x0, t, weights, rng)
    state = init_concepts(vocab, weights.embedding)
    traces, ctraces = [], []
    for layer in weights.layers:
        x, p, trace = mm_attention_layer(x, p, layer, cond, timestep=t)
        state, ctrace = concept_step(state, layer, trace, mode)
        traces.append(trace)
        ctraces.append(ctrace)
    return traces, ctraces


def non_interference_check(tokens, x0, t, weights: MMDiTWeights, config: ModelConfig | None,
                           vocab: ConceptVocabulary, rng_seed: int = 0,
                           interleaved=forward_with_concepts) -> bool:
    """True iff attaching the concept stream leaves image/prompt outputs bit-identical."""
    from .mmdit import forward_with_trace

    plain = forward_with_trace(tokens, x0, t, weights, config, Rng(rng_seed))
    attached, _ = interleaved(tokens, x0, t, weights, vocab, Rng(rng_seed))
    if len(plain) != len(attached):
        return False
    for a, b in zip(plain, attached):
        for name in ("o_x", "o_p", "x_next", "p_next"):
            u, v = getattr(a, name), getattr(b, name)
            if u.shape != v.shape or u.tobytes() != v.tobytes():
                return False
    return True


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------


def _space_pair(trace: LayerTrace, ctrace: ConceptTrace, space: str):
    """(image-side, concept-side) matrices whose dot products form the scores."""
    if space == "output":
        return trace.o_x, ctrace.o_c
    if space == "value":
        return trace.v_x, ctrace.v_c
    if space == "cross_attention":
        return trace.k_x, ctrace.q_c
    raise ValueError(f"space must be one of {SPACES}, got {space!r}")


def apply_softmax(scores: np.ndarray, axis: str = "concepts") -> np.ndarray:
    if axis == "concepts":
        return row_softmax(scores)
    if axis == "pixels":
        return row_softmax(scores.T).T
    raise ValueError(f"softmax axis must be one of {SOFTMAX_AXES}, got {axis!r}")


def saliency_scores(trace: LayerTrace, ctrace: ConceptTrace, space: str = "output",
                    softmax: bool = False, head_agg: str = "concat",
                    softmax_axis: str = "concepts") -> np.ndarray:
    """Image-vs-concept similarity for one layer, shape ``(n, r)``.

    ``concat`` takes dot products in the full concatenated width; ``mean``
    averages the per-head ``(n, r)`` products.
    """
    if trace.layer != ctrace.layer:
        raise ValueError(f"layer mismatch: image trace {trace.layer}, concept trace {ctrace.layer}")
    if head_agg not in HEAD_AGGS:
        raise ValueError(f"head_agg must be one of {HEAD_AGGS}, got {head_agg!r}")
    img, con = _space_pair(trace, ctrace, space)
    if head_agg == "concat":
        scores = matmul(img, con.T)
    else:
        ih, ch = split_heads(img, trace.n_heads), split_heads(con, trace.n_heads)
        scores = sum(matmul(ih[h], ch[h].T) for h in range(trace.n_heads)) / trace.n_heads
    return apply_softmax(scores, softmax_axis) if softmax else scores


@dataclass
class SaliencyStack:
    """Raw (pre-softmax) per-layer scores; softmax is applied when aggregating."""

    layers: list[int]
    scores: list[np.ndarray]
    space: str
    softmax: bool
    head_agg: str
    img_h: int
    img_w: int
    concepts: tuple[str, ...]
    timestep: float | None = None
    softmax_axis: str = "concepts"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != len(self.scores):
            raise ValueError("one score matrix per layer required")
        for s in self.scores:
            if s.shape != (self.img_h * self.img_w, len(self.concepts)):
                raise ValueError(f"score matrix shape {s.shape} inconsistent with stack")
            if not np.all(np.isfinite(s)):
                raise ValueError("non-finite saliency scores")


@dataclass
class SaliencyMap:
    scores: np.ndarray  # (img_h, img_w, r)
    concepts: tuple[str, ...]
    provenance: dict

    @property
    def shape(self):
        return self.scores.shape

    def plane(self, concept) -> np.ndarray:
        idx = concept if isinstance(concept, (int, np.integer)) else list(self.concepts).index(concept)
        return self.scores[:, :, idx]

    def flat(self) -> np.ndarray:
        h, w, r = self.scores.shape
        return self.scores.reshape(h * w, r)


def build_stack(traces, ctraces, space: str = "output", softmax: bool = True,
                head_agg: str = "concat", config: ModelConfig | None = None,
                concepts=None, softmax_axis: str = "concepts", **extra) -> SaliencyStack:
    traces, ctraces = list(traces), list(ctraces)
    if len(traces) != len(ctraces):
        raise ValueError("need one concept trace per layer trace")
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")
    n = traces[0].o_x.shape[0]
    if config is not None:
        img_h, img_w = config.img_h, config.img_w
    else:
        img_h, img_w = n, 1
    r = ctraces[0].o_c.shape[0]
    concepts = tuple(concepts) if concepts is not None else tuple(f"c{i}" for i in range(r))
    return SaliencyStack(
        layers=[t.layer for t in traces],
        scores=[saliency_scores(t, c, space, False, head_agg) for t, c in zip(traces, ctraces)],
        space=space, softmax=softmax, head_agg=head_agg, img_h=img_h, img_w=img_w,
        concepts=concepts, timestep=traces[0].timestep, softmax_axis=softmax_axis, extra=extra,
    )


def aggregate_layers(stack: SaliencyStack, layer_subset=None) -> SaliencyMap:
    """Mean over the chosen layers of the (optionally softmaxed) per-layer scores."""
    subset = list(stack.layers) if layer_subset is None else sorted(set(layer_subset))
    if not subset:
        raise ValueError("layer subset is empty")
    missing = [l for l in subset if l not in stack.layers]
    if missing:
        raise ValueError(f"layers {missing} not in stack (available {stack.layers})")
    pos = {l: i for i, l in enumerate(stack.layers)}
    total = np.zeros_like(stack.scores[0])
    for l in subset:
        s = stack.scores[pos[l]]
        total = total + (apply_softmax(s, stack.softmax_axis) if stack.softmax else s)
    mean = total / len(subset)
    provenance = {
        "layers": subset,
        "timestep": stack.timestep,
        "space": stack.space,
        "softmax": stack.softmax,
        "head_agg": stack.head_agg,
    }
    if stack.softmax_axis != "concepts":
        provenance["softmax_axis"] = stack.softmax_axis
    provenance.update(stack.extra)
    return SaliencyMap(
        scores=mean.reshape(stack.img_h, stack.img_w, len(stack.concepts)),
        concepts=stack.concepts,
        provenance=provenance,
    )


def aggregate_frames(per_frame) -> SaliencyMap:
    """Average per-frame maps of a video into one map."""
    per_frame = list(per_frame)
    if not per_frame:
        raise ValueError("no frames to aggregate")
    first = per_frame[0]
    for m in per_frame[1:]:
        if m.scores.shape != first.scores.shape or m.concepts != first.concepts:
            raise ValueError("frames disagree in shape or concepts")
        if m.provenance != first.provenance:
            raise ValueError("frames disagree in provenance")
    total = np.zeros_like(first.scores)
    for m in per_frame:
        total = total + m.scores
    return SaliencyMap(
        scores=total / len(per_frame),
        concepts=first.concepts,
        provenance={**first.provenance, "frames": len(per_frame)},
    )


def raw_prompt_cross_attention(trace: LayerTrace, head_agg: str = "concat") -> np.ndarray:
    """Prompt-query vs image-key maps, softmaxed over pixels, shape ``(n, l)``."""
    if head_agg == "concat":
        return row_softmax(matmul(trace.q_p, trace.k_x.T)).T
    if head_agg == "mean":
        qh, kh = trace.heads("q_p"), trace.heads("k_x")
        probs = [row_softmax(matmul(qh[h], kh[h].T)) for h in range(trace.n_heads)]
        return (sum(probs) / trace.n_heads).T
    raise ValueError(f"head_agg must be one of {HEAD_AGGS}, got {head_agg!r}")


def concept_saliency_map(tokens, x0, t, weights: MMDiTWeights, vocab: ConceptVocabulary,
                         space: str = "output", softmax: bool = True, head_agg: str = "concat",
                         layers=None, mode: str = "ca+sa", rng: Rng | None = None) -> SaliencyMap:
    """Full pipeline: forward with concepts, per-layer scores, layer average."""
    traces, ctraces = forward_with_concepts(tokens, x0, t, weights, vocab, rng, mode)
    stack = build_stack(traces, ctraces, space, softmax, head_agg, weights.config, vocab.concepts,
                        config_hash=weights.config.hash(), attention=mode)
    return aggregate_layers(stack, layers)
