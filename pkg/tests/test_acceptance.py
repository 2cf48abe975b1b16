"""Acceptance gate: one verdict line per criterion, at the stated tolerances."""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from acceptance_log import verdict
from conftest import random_modulation
from mutants import leaky_forward
from oracles import brute_accuracy, brute_miou, enumerate_ap, naive_concept_step, naive_layer

from ca_kit.cli import main
from ca_kit.conceptattn import (
    SPACES,
    ConceptVocabulary,
    aggregate_layers,
    build_stack,
    concept_projections,
    forward_with_concepts,
    init_concepts,
    non_interference_check,
    one_directional_attention,
)
from ca_kit.formats import read_scores, report_json, write_pgm
from ca_kit.mmdit import DEFAULT_TOKENS, ModelConfig, init_weights, mm_attention_layer, noise_image, prepare_inputs
from ca_kit.numerics import Rng
from ca_kit.planted import CALIBRATED_SIGMA
from ca_kit.segeval import SegmentationSample, average_precision, evaluate_single_object, miou, pixel_accuracy

PRODUCER = Path(__file__).with_name("cas1_producer.py")


def random_case(gen, max_tokens=8, max_d=16, max_concepts=4, min_concepts=1):
    """Random (config, weights, prompt, vocabulary, image, t) with n <= max_tokens, d <= max_d."""
    n_heads = int(gen.choice([1, 2, 4]))
    # layer norm needs d_model >= 2
    d_model = n_heads * int(gen.integers(2 if n_heads == 1 else 1, max_d // n_heads + 1))
    img_h = int(gen.integers(1, 3))
    img_w = int(gen.integers(1, max_tokens // img_h + 1))
    config = ModelConfig(d_model=d_model, n_heads=n_heads, n_layers=int(gen.integers(1, 4)),
                         img_h=img_h, img_w=img_w, prompt_len=int(gen.integers(1, 5)),
                         mlp_ratio=int(gen.integers(1, 3)))
    weights = random_modulation(init_weights(config, int(gen.integers(1 << 30))), int(gen.integers(1 << 30)))
    words = list(DEFAULT_TOKENS)
    prompt = [str(w) for w in gen.choice(words, size=int(gen.integers(1, config.prompt_len + 1)))]
    concepts = tuple(str(w) for w in gen.choice(words, size=int(gen.integers(min_concepts, max_concepts + 1)),
                                           replace=False))
    x0 = gen.normal(size=(config.n_image_tokens, d_model))
    t = float(gen.integers(0, 1001))
    return config, weights, prompt, ConceptVocabulary(concepts), x0, t


def test_non_interference():
    gen = np.random.default_rng(2024)
    start = time.perf_counter()
    clean = caught = 0
    n = 60
    for k in range(n):
        config, weights, prompt, vocab, x0, t = random_case(gen)
        clean += non_interference_check(prompt, x0, t, weights, config, vocab, rng_seed=k)
        caught += not non_interference_check(prompt, x0, t, weights, config, vocab, rng_seed=k,
                                             interleaved=leaky_forward)
    elapsed = time.perf_counter() - start
    verdict("non-interference", clean == n and caught == n and elapsed < 30,
            f"{clean}/{n} bit-identical, mutant caught {caught}/{n}, {elapsed:.1f}s (< 30s)")


def test_attention_oracle_equivalence():
    gen = np.random.default_rng(99)
    worst = 0.0
    n = 120
    for k in range(n):
        config, weights, prompt, vocab, x0, t = random_case(gen)
        x, p, cond = prepare_inputs(prompt, x0, t, weights, Rng(k))
        c = init_concepts(vocab, weights.embedding).c
        for layer in weights.layers:
            x_next, p_next, trace = mm_attention_layer(x, p, layer, cond)
            ref = naive_layer(x, p, layer, cond)
            for name in ("o_x", "o_p", "x_next", "p_next"):
                worst = max(worst, np.abs(getattr(trace, name) - ref[name]).max())
            worst = max(worst, np.abs(trace.attn - ref["probs"]).max())
            q_c, k_c, v_c = concept_projections(c, layer, cond)
            for mode in ("ca+sa", "ca", "sa", "none"):
                o_c = one_directional_attention(q_c, k_c, v_c, trace, mode)
                want = naive_concept_step(c, layer, cond, trace.k_x, trace.v_x, mode)["o_c"]
                worst = max(worst, np.abs(o_c - want).max())
            c = naive_concept_step(c, layer, cond, trace.k_x, trace.v_x)["c_next"]
            x, p = x_next, p_next
    verdict("attention-oracle equivalence", worst <= 1e-10,
            f"{n} instances (n<=8, r<=4, d<=16), max |diff| = {worst:.2e} (<= 1e-10)")


def test_metric_oracle_equivalence():
    gen = np.random.default_rng(7)
    n, mismatches = 520, 0
    for k in range(n):
        h, w = (int(v) for v in gen.integers(1, 9, size=2))
        classes = int(gen.integers(2, 5))
        gt = gen.integers(0, classes, size=(h, w))
        pred = gen.integers(0, classes, size=(h, w))
        gt[gen.random((h, w)) < 0.15] = 255
        if (gt == 255).all():
            gt[0, 0] = 0
        cls = list(range(classes))
        mismatches += pixel_accuracy(pred, gt) != brute_accuracy(pred, gt)
        mismatches += miou(pred, gt, cls) != brute_miou(pred, gt, cls)
        # integer-valued scores make rank ties common
        scores = gen.integers(0, 4, size=h * w).astype(float)
        binary = (gen.random(h * w) < 0.4).astype(int)
        if binary.any():
            mismatches += average_precision(scores, binary) != enumerate_ap(scores.tolist(), binary.tolist())
    worked = miou(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]]), [0, 1])
    verdict("metric-oracle equivalence", mismatches == 0 and worked == 7 / 12,
            f"{n} random masks up to 8x8 with ignore/tie cases, {mismatches} mismatches; "
            f"2x2 worked example mIoU = {worked!r} (7/12 = {7 / 12!r})")


def test_softmax_normalization():
    gen = np.random.default_rng(5)
    worst, maps = 0.0, 0
    for k in range(6):
        config, weights, prompt, vocab, x0, t = random_case(gen, min_concepts=2)
        traces, ctraces = forward_with_concepts(prompt, x0, t, weights, vocab, Rng(k))
        for space in SPACES:
            for head_agg in ("concat", "mean"):
                stack = build_stack(traces, ctraces, space, True, head_agg, config, vocab.concepts)
                subsets = [[layer] for layer in stack.layers] + [None]
                for subset in subsets:
                    smap = aggregate_layers(stack, subset)
                    worst = max(worst, np.abs(smap.scores.sum(axis=2) - 1.0).max())
                    maps += 1
    verdict("softmax normalization", worst <= 1e-9,
            f"{maps} maps over 3 spaces x 2 head modes x each layer and all layers, "
            f"max |sum - 1| = {worst:.1e} (<= 1e-9)")


def test_rectified_flow_endpoints():
    gen = np.random.default_rng(3)
    ok = True
    for seed in range(20):
        shape = (int(gen.integers(1, 9)), int(gen.integers(1, 17)))
        x0, other = gen.normal(size=shape), gen.normal(size=shape)
        ok &= noise_image(x0, 0, 1000, Rng(seed)).tobytes() == x0.tobytes()
        end = noise_image(x0, 1000, 1000, Rng(seed))
        ok &= end.tobytes() == noise_image(other, 1000, 1000, Rng(seed)).tobytes()
        ok &= end.tobytes() == Rng(seed).normal("noise", shape).tobytes()
        ok &= end.tobytes() != noise_image(x0, 1000, 1000, Rng(seed + 100)).tobytes()
    verdict("rectified-flow endpoints", bool(ok),
            "t=0 returns x0 bit-exactly; t=T returns the seed's noise draw, independent of x0 (20 seeds)")


def test_planted_recovery(tmp_path):
    timings, accs = [], []
    start = time.perf_counter()
    assert main(["demo-planted", "--seed", "0", "--sigma", "0", "--out", str(tmp_path / "clean")]) == 0
    timings.append(time.perf_counter() - start)
    clean = json.loads((tmp_path / "clean" / "report.json").read_text())
    for seed in range(5):
        start = time.perf_counter()
        out = tmp_path / f"noisy{seed}"
        assert main(["demo-planted", "--seed", str(seed), "--sigma", str(CALIBRATED_SIGMA), "--out", str(out)]) == 0
        timings.append(time.perf_counter() - start)
        accs.append(json.loads((out / "report.json").read_text())["acc"])
    ok = clean["acc"] == 1.0 and clean["miou"] == 1.0 and min(accs) >= 0.99 and max(timings) < 10
    verdict("planted-segmentation recovery", ok,
            f"sigma=0: Acc={clean['acc']}, mIoU={clean['miou']}; calibrated sigma={CALIBRATED_SIGMA}: "
            f"min Acc={min(accs)} over 5 seeds (>= 0.99); slowest run {max(timings):.2f}s (< 10s)")


def test_ablation_grid_structure(tmp_path):
    expected = {
        "space-softmax": (["space", "softmax"], [["cross_attention", "off"], ["cross_attention", "on"],
                                                 ["value", "off"], ["value", "on"],
                                                 ["output", "off"], ["output", "on"]]),
        "ca-sa": (["ca", "sa"], [["off", "off"], ["off", "on"], ["on", "off"], ["on", "on"]]),
        "layers": (["layers"], [[str(i)] for i in range(6)] + [["all"]]),
        "timesteps": (["timestep"], [["0"], ["250"], ["500"], ["750"], ["1000"]]),
    }
    problems = []
    for sweep, (cols, keys) in expected.items():
        argv = ["ablate", "--sweep", sweep, "--planted", "1", "--out", str(tmp_path)]
        if sweep == "timesteps":
            argv += ["--steps", "0,250,500,750,1000"]
        if main(argv) != 0:
            problems.append(f"{sweep}: nonzero exit")
            continue
        rows = [ln.split(",") for ln in (tmp_path / f"ablation_{sweep.replace('-', '_')}.csv")
                .read_text().splitlines()]
        if rows[0] != cols + ["acc", "miou", "map"]:
            problems.append(f"{sweep}: header {rows[0]}")
        if [r[: len(cols)] for r in rows[1:]] != keys:
            problems.append(f"{sweep}: row keys {[r[: len(cols)] for r in rows[1:]]}")
        values = [float(v) for r in rows[1:] for v in r[len(cols):]]
        if not all(0.0 <= v <= 1.0 for v in values):
            problems.append(f"{sweep}: metric outside [0, 1]")
    verdict("ablation-grid structure", not problems,
            "space-softmax 6 rows, ca-sa 4 rows, layers 6+1 rows, timesteps 5 rows, all metrics in [0, 1]"
            if not problems else "; ".join(problems))


def full_pipeline(root: Path):
    root.mkdir()
    assert main(["gen-weights", "--seed", "11", "--out", str(root / "w.caw")]) == 0
    assert main(["run", "--weights", str(root / "w.caw"), "--prompt", "a photo of cat",
                 "--concepts", "cat,sky,grass", "--synthetic", "5", "--timestep", "500",
                 "--seed", "3", "--out", str(root / "run")]) == 0
    assert main(["demo-planted", "--seed", "2", "--sigma", "0.5", "--out", str(root / "demo")]) == 0
    gt = np.zeros((16, 16), dtype=int)
    gt[4:12, 4:12] = 1
    write_pgm(root / "run" / "mask.pgm", gt)
    (root / "m.jsonl").write_text(json.dumps({"id": "a", "scores_path": "run/scores.cas1",
                                              "mask_path": "run/mask.pgm", "target_concept": "cat"}) + "\n")
    assert main(["eval", "--manifest", str(root / "m.jsonl"), "--out", str(root / "eval")]) == 0
    assert main(["ablate", "--sweep", "ca-sa", "--planted", "1", "--out", str(root / "ablate")]) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_end_to_end_determinism(tmp_path):
    a, b = full_pipeline(tmp_path / "a"), full_pipeline(tmp_path / "b")
    kinds = sorted({p.suffix for p in a})
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    needed = {".cas1", ".pgm", ".json", ".csv"} <= set(kinds)
    verdict("end-to-end determinism", same and needed,
            f"{len(a)} artifacts ({', '.join(kinds)}) byte-identical across two runs")


def test_external_score_pathway(tmp_path):
    gen = np.random.default_rng(8)
    concepts = ["dog", "grass", "sky"]
    samples, lines = [], []
    for k in range(10):
        scores = gen.normal(size=(5, 6, 3))
        gt = (gen.random((5, 6)) < 0.3).astype(int)
        gt[0, 0] = 1
        payload = {"vocabulary": concepts, "img_h": 5, "img_w": 6, "scores": scores.reshape(30, 3).tolist(),
                "provenance": {"producer": "external"}}
        (tmp_path / f"{k}.json").write_text(json.dumps(payload))
        subprocess.run([sys.executable, str(PRODUCER), str(tmp_path / f"{k}.json"), str(tmp_path / f"{k}.cas1")],
                       check=True)
        write_pgm(tmp_path / f"{k}.pgm", gt)
        lines.append(json.dumps({"id": f"x{k}", "scores_path": f"{k}.cas1", "mask_path": f"{k}.pgm",
                                 "target_concept": "dog"}))
        samples.append(SegmentationSample(f"x{k}", scores, concepts, gt, target="dog"))
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["eval", "--manifest", str(tmp_path / "m.jsonl"), "--background", "grass,sky",
                 "--out", str(tmp_path / "r")]) == 0
    in_memory = evaluate_single_object(samples, ["grass", "sky"])
    same_report = (tmp_path / "r" / "report.json").read_text() == report_json(in_memory)
    same_scores = all(read_scores(tmp_path / f"{k}.cas1").scores.tobytes() == s.scores.tobytes()
                      for k, s in enumerate(samples))
    verdict("external-score pathway", same_report and same_scores,
            f"10 CAS1 files from a separate process evaluate identically to in-memory scores "
            f"(acc={in_memory.acc:.4f}, miou={in_memory.miou:.4f}, map={in_memory.map:.4f})")
