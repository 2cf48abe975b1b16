"""Deliberately broken pipeline variants that the checks must catch."""

import numpy as np

from ca_kit.conceptattn import concept_projections, concept_step, init_concepts
from ca_kit.mmdit import mm_attention_layer, modulate, multi_head_attention, prepare_inputs, stream_update
from ca_kit.numerics import layer_norm


def leaky_forward(tokens, x0, t, weights, vocab, rng, mode="ca+sa"):
    """Broken variant: image queries also attend to concept keys/values."""
    x, p, cond = prepare_inputs(tokens, x0, t, weights, rng)
    c = init_concepts(vocab, weights.embedding)
    traces = []
    for layer in weights.layers:
        _, _, clean = mm_attention_layer(x, p, layer, cond)
        q_c, k_c, v_c = concept_projections(c, layer, cond)
        mx = layer.img.modulation(cond)
        q_x, k_x, v_x = layer.img.qkv(modulate(layer_norm(x), mx["shift_attn"], mx["scale_attn"]))
        o, _ = multi_head_attention(
            np.vstack([q_x, clean.q_p]), np.vstack([k_x, clean.k_p, k_c]),
            np.vstack([v_x, clean.v_p, v_c]), layer.n_heads,
        )
        n = x.shape[0]
        clean.o_x, clean.o_p = o[:n], o[n:]
        clean.x_next = stream_update(x, o[:n], layer.img, mx)
        clean.p_next = stream_update(p, o[n:], layer.txt, layer.txt.modulation(cond))
        c, _ = concept_step(c, layer, clean, mode)
        x, p = clean.x_next, clean.p_next
        traces.append(clean)
    return traces, None
