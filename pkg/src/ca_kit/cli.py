"""``ca-kit`` command line.

Exit codes: 0 on success, 1 for usage errors (bad flags or flag values),
2 for data errors (unreadable or inconsistent files, unknown tokens).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .ablation import Scene, SWEEPS, planted_scenes, run_ablation
from .conceptattn import ConceptVocabulary, concept_saliency_map
from .mmdit import MMDiTWeights, ModelConfig, init_weights
from .numerics import Rng
from .planted import CALIBRATED_SIGMA, planted_weights, run_planted_demo
from .segeval import evaluate_multiclass, evaluate_single_object

SPACE_FLAGS = {"ca": "cross_attention", "value": "value", "output": "output"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_default() -> int:
    raw = os.environ.get("CA_KIT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CA_KIT_SEED must be an integer, got {raw!r}") from None


def _words(text: str) -> list[str]:
    return [w for w in text.replace(",", " ").split() if w]


def parse_layers(text: str, n_layers: int):
    """``all``, a range ``a-b`` (inclusive) or a list ``a,b,c``; None means all."""
    text = text.strip()
    if text == "all":
        return None
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-", 1))
            picks = list(range(lo, hi + 1))
        else:
            picks = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--layers: cannot parse {text!r}") from None
    if not picks:
        raise UsageError(f"--layers: {text!r} selects no layers")
    bad = [i for i in picks if not 0 <= i < n_layers]
    if bad:
        raise UsageError(f"--layers: {bad} outside 0..{n_layers - 1}")
    return picks


def parse_steps(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--steps: cannot parse {text!r}") from None


def _check_timestep(t: float, config: ModelConfig):
    if not 0 <= t <= config.timesteps:
        raise UsageError(f"--timestep must lie in [0, {config.timesteps}], got {t}")


def _load_weights(path) -> MMDiTWeights:
    try:
        return MMDiTWeights.load(path)
    except OSError as exc:
        raise DataError(f"cannot read weights {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_maps(out: Path, smap) -> None:
    """One display PGM per concept plus the raw CAS1 scores."""
    for c in smap.concepts:
        formats.write_pgm(out / f"saliency_{c}.pgm", formats.display_scale(smap.plane(c)))
    formats.write_scores(out / "scores.cas1", smap)


def write_report(out: Path, report, label="ConceptAttention") -> None:
    (out / "report.json").write_text(formats.report_json(report))
    (out / "report.csv").write_text(formats.report_csv(report, label))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_weights(args) -> int:
    try:
        config = ModelConfig(d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers,
                             img_h=args.img_h, img_w=args.img_w, prompt_len=args.prompt_len,
                             mlp_ratio=args.mlp_ratio)
    except ValueError as exc:
        raise DataError(f"invalid config: {exc}") from None
    weights = planted_weights(config, args.seed) if args.planted else init_weights(config, args.seed)
    try:
        weights.save(args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    print(config.hash())
    return 0


def _image_tokens(args, config: ModelConfig) -> np.ndarray:
    if args.image is not None:
        try:
            pixels = formats.read_pgm(args.image)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {args.image}: {exc}") from None
        if pixels.shape != (config.img_h, config.img_w):
            raise DataError(f"image {args.image} is {pixels.shape[0]}x{pixels.shape[1]}, "
                            f"model expects {config.img_h}x{config.img_w}")
        return formats.lift_grayscale(pixels, config.d_model, args.seed)
    return Rng(args.synthetic).normal("synthetic.image", (config.n_image_tokens, config.d_model))


def cmd_run(args) -> int:
    if (args.image is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --image or --synthetic")
    weights = _load_weights(args.weights)
    config = weights.config
    _check_timestep(args.timestep, config)
    layers = parse_layers(args.layers, config.n_layers)
    try:
        vocab = ConceptVocabulary(tuple(_words(args.concepts)), tuple(_words(args.background)))
    except ValueError as exc:
        raise UsageError(f"--concepts: {exc}") from None
    x0 = _image_tokens(args, config)
    try:
        smap = concept_saliency_map(_words(args.prompt), x0, args.timestep, weights, vocab,
                                    space=SPACE_FLAGS[args.space], softmax=args.softmax == "on",
                                    head_agg=args.head_agg, layers=layers, rng=Rng(args.seed))
    except LookupError as exc:
        raise DataError(str(exc.args[0]) if exc.args else str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_maps(_out_dir(args.out), smap)
    return 0


def cmd_eval(args) -> int:
    try:
        samples = formats.manifest_samples(formats.read_manifest(args.manifest))
        background = _words(args.background)
        if args.mode == "single":
            report = evaluate_single_object(samples, background, miou_mode=args.miou_mode)
        else:
            report = evaluate_multiclass(samples, background)
    except OSError as exc:
        raise DataError(f"cannot read {args.manifest}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _out_dir(args.out)
    write_report(out, report)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def _manifest_scenes(path, config: ModelConfig, seed: int) -> list[Scene]:
    """Ablation manifests point at PGM images rather than precomputed scores."""
    scenes = []
    for rec in formats.read_manifest(path):
        sid = rec["id"]
        try:
            if rec.get("image_path") is None:
                raise ValueError("record has no image_path")
            pixels = formats.read_pgm(rec["image_path"])
            if pixels.shape != (config.img_h, config.img_w):
                raise ValueError(f"image is {pixels.shape}, model expects {(config.img_h, config.img_w)}")
            vocab = ConceptVocabulary(tuple(rec["concepts"]), tuple(rec.get("background", ())))
            scenes.append(Scene(sid, tuple(rec["prompt"]), formats.lift_grayscale(pixels, config.d_model, seed),
                                vocab, formats.read_pgm(rec["mask_path"]),
                                rec.get("target_concept"), rec.get("label_map"), seed))
        except KeyError as exc:
            raise DataError(f"sample {sid}: record lacks {exc.args[0]!r}") from None
        except (OSError, ValueError) as exc:
            raise DataError(f"sample {sid}: {exc}") from None
    return scenes


def cmd_ablate(args) -> int:
    if (args.manifest is None) == (args.planted is None):
        raise UsageError("give exactly one of --manifest or --planted")
    sweep = args.sweep.replace("-", "_")
    if args.weights is not None:
        weights = _load_weights(args.weights)
    elif args.planted is not None:
        weights = planted_weights(ModelConfig(), args.seed)
    else:
        raise UsageError("--manifest needs --weights")
    config = weights.config
    _check_timestep(args.timestep, config)
    layers = parse_layers(args.layers, config.n_layers)
    steps = parse_steps(args.steps) if args.steps else None
    if args.planted is not None:
        if args.planted < 1:
            raise UsageError("--planted must be at least 1")
        try:
            scenes = planted_scenes(weights, args.planted, args.sigma, args.seed, protocol=args.mode)
        except (LookupError, ValueError) as exc:
            raise DataError(str(exc)) from None
    else:
        try:
            scenes = _manifest_scenes(args.manifest, config, args.seed)
        except OSError as exc:
            raise DataError(f"cannot read {args.manifest}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise DataError(str(exc)) from None
    try:
        grid = run_ablation(sweep, scenes, weights, space=SPACE_FLAGS[args.space],
                            softmax=args.softmax == "on", head_agg=args.head_agg, layers=layers,
                            timestep=args.timestep, protocol=args.mode, steps=steps)
    except LookupError as exc:
        raise DataError(str(exc.args[0]) if exc.args else str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _out_dir(args.out)
    text = grid.to_csv()
    (out / f"ablation_{sweep}.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_demo_planted(args) -> int:
    if args.sigma < 0:
        raise UsageError("--sigma must be non-negative")
    result = run_planted_demo(args.seed, args.sigma)
    scene, smap = result["scene"], result["map"]
    out = _out_dir(args.out)
    formats.write_pgm(out / "gt.pgm", scene.gt)
    formats.write_pgm(out / "pred.pgm", result["pred"])
    write_maps(out, smap)
    write_report(out, result["multi"])
    extra = {
        "seed": args.seed,
        "sigma": args.sigma,
        "region_acc": result["region_acc"],
        "multiclass": result["multi"].summary(),
        "single_object": result["single"].summary(),
    }
    (out / "demo.json").write_text(json.dumps(extra, sort_keys=True, indent=2) + "\n")
    print(json.dumps(result["multi"].summary(), sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _saliency_flags(p, seed_default):
    p.add_argument("--timestep", type=float, default=500.0)
    p.add_argument("--layers", default="all", help='"all", a range "a-b" or a list "a,b,c"')
    p.add_argument("--space", choices=sorted(SPACE_FLAGS), default="output")
    p.add_argument("--softmax", choices=("on", "off"), default="on")
    p.add_argument("--head-agg", choices=("concat", "mean"), default="concat")
    p.add_argument("--seed", type=int, default=seed_default)


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = _Parser(prog="ca-kit", description="Concept saliency maps for a toy MMDiT.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-weights", help="write a CAW1 weight file")
    defaults = ModelConfig()
    for name in ("d_model", "n_heads", "n_layers", "img_h", "img_w", "prompt_len", "mlp_ratio"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    g.add_argument("--planted", action="store_true", help="use the planted-recovery construction")
    g.add_argument("--seed", type=int, default=seed_default)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_weights)

    r = sub.add_parser("run", help="saliency maps for one image")
    r.add_argument("--weights", required=True)
    r.add_argument("--prompt", required=True, help="prompt tokens, comma or space separated")
    r.add_argument("--concepts", required=True, help="comma-separated concept tokens")
    r.add_argument("--background", default="", help="concepts among --concepts that are background")
    r.add_argument("--image", help="grayscale PGM with one pixel per image token")
    r.add_argument("--synthetic", type=int, help="seed for random image tokens instead of --image")
    r.add_argument("--out", required=True)
    _saliency_flags(r, seed_default)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a manifest of CAS1 files against masks")
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=("single", "multi"), default="single")
    e.add_argument("--miou-mode", choices=("two_class", "foreground"), default="two_class")
    e.add_argument("--background", default="", help="background concepts, comma separated")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one pipeline parameter")
    a.add_argument("--sweep", required=True, choices=[s.replace("_", "-") for s in SWEEPS])
    a.add_argument("--weights")
    a.add_argument("--manifest")
    a.add_argument("--planted", type=int, help="number of planted scenes to sweep over")
    a.add_argument("--sigma", type=float, default=CALIBRATED_SIGMA)
    a.add_argument("--steps", help="comma-separated timesteps or layer indices")
    a.add_argument("--mode", choices=("single", "multi"), default="single")
    a.add_argument("--out", required=True)
    _saliency_flags(a, seed_default)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("demo-planted", help="recover a planted segmentation")
    d.add_argument("--seed", type=int, default=seed_default)
    d.add_argument("--sigma", type=float, default=0.0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demo_planted)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser(_seed_default())
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"ca-kit: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"ca-kit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
