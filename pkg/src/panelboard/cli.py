"""Command-line entry point: decompose, generate, evaluate, diagnose.

Exit codes: 0 ok, 2 validation/configuration, 3 transport, 4 internal.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import director
from .anchoring import StoryboardSpec, load_specs
from .backend import BackendConfig, CaptureHook, run_storyboard
from .benchmark import (
    BenchmarkLookupError,
    BenchmarkParseError,
    BenchmarkValidationError,
    SceneDiversityScorer,
    evaluate,
    load_benchmark,
)
from .attention import key_pca_map, reciprocal_heatmap
from .diversity import DetectorConfigError, FixtureDetector
from .export import RunManifest, atomic_write_text, load_png, save_png, sha256_file, sha256_json, write_diagnostic

logger = logging.getLogger("panelboard")

EXIT_OK, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_INTERNAL = 0, 2, 3, 4

DEFAULT_FIXTURES = Path(__file__).parent / "data" / "director"

# CLI flag -> BackendConfig field
CONFIG_FLAGS = {
    "steps": "steps",
    "guidance": "guidance",
    "lam": "lam",
    "momentum": "momentum",
    "ravm_blocks": "ravm_blocks",
    "ravm_start": "ravm_start",
    "ravm_end": "ravm_end",
    "lpa": "lpa",
    "ravm": "ravm",
    "h_tok": "H_tok",
    "w_tok": "W_tok",
    "dim": "d",
    "heads": "heads",
    "blocks": "blocks",
    "text_tokens": "text_tokens",
    "patch": "patch",
    "model_seed": "seed",
}


class ConfigError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="YAML/JSON key-value backend config")
    g.add_argument("--steps", type=int)
    g.add_argument("--guidance", type=float)
    g.add_argument("--lambda", dest="lam", type=float, help="value mixing weight (default 0.5)")
    g.add_argument("--momentum", type=float, help="reciprocal EMA momentum (default 0.8)")
    g.add_argument("--ravm-blocks", type=_int_list, help="comma-separated block indices")
    g.add_argument("--ravm-start", type=int)
    g.add_argument("--ravm-end", type=int)
    g.add_argument("--no-lpa", dest="lpa", action="store_false", default=None)
    g.add_argument("--no-ravm", dest="ravm", action="store_false", default=None)
    g.add_argument("--h-tok", type=int)
    g.add_argument("--w-tok", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--blocks", type=int)
    g.add_argument("--text-tokens", type=int)
    g.add_argument("--patch", type=int)
    g.add_argument("--model-seed", type=int, help="toy model weight seed")


def resolve_config(args: argparse.Namespace, base: Optional[dict] = None) -> BackendConfig:
    """Built-in defaults < config file (or manifest) < CLI flags."""
    if base is not None:
        config = BackendConfig.from_dict(base)
    elif getattr(args, "config", None):
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        config = BackendConfig.from_file(args.config)
    else:
        config = BackendConfig()
    overrides = {field: getattr(args, flag, None) for flag, field in CONFIG_FLAGS.items()}
    return config.with_overrides(**overrides)


# -- decompose ---------------------------------------------------------------


def cmd_decompose(args) -> int:
    t0 = time.time()
    story = args.story.read_text()
    if args.live:
        client = director.ChatCompletionClient(
            endpoint=args.endpoint, model=args.model, token_env=args.token_env, record_dir=args.record
        )
    else:
        client = director.FixtureClient(args.fixture or DEFAULT_FIXTURES)
    d = director.decompose(story, args.n, client, reference_prompt=args.reference)
    warnings = director.validate_decomposition(d)
    for w in warnings:
        logger.warning(w)
    story_id = args.story_id or args.story.stem
    out = {**d.to_dict(), **d.to_spec_dict(story_id, args.seed), "warnings": warnings}
    atomic_write_text(args.out, json.dumps(out, indent=2, ensure_ascii=False) + "\n")
    RunManifest(
        command=" ".join(["decompose", *map(str, args.argv)]),
        seeds={story_id: args.seed},
        inputs={"story": sha256_file(args.story), "story_hash": director.story_hash(story), "n": args.n},
        outputs={args.out.name: sha256_file(args.out)},
        times={"start": t0, "wall_s": time.time() - t0},
        extra={"source": d.source},
    ).write(args.out.with_name(args.out.name + ".manifest.json"))
    print(f"wrote {args.out} ({d.n} scenes, source={d.source})")
    return EXIT_OK


# -- generate ----------------------------------------------------------------


def generate_one(spec: StoryboardSpec, config: BackendConfig, out: Path, composites: bool) -> tuple[dict, dict]:
    """Run one storyboard and write its files; returns (output hashes, info)."""
    result = run_storyboard(spec, config)
    story_dir = out / spec.story_id
    hashes = {}
    for i, panel in enumerate(result.panels):
        p = save_png(story_dir / f"panel_{i}.png", panel)
        hashes[str(p.relative_to(out))] = sha256_file(p)
    if composites:
        for i, comp in enumerate(result.composites):
            p = save_png(story_dir / f"composite_{i}.png", comp)
            hashes[str(p.relative_to(out))] = sha256_file(p)
    diag = result.diagnostics
    info = {
        "ravm_sites": len(diag.correspondence_sizes),
        "correspondence_sizes": [list(r) for r in diag.correspondence_sizes],
        "mean_value_distance": diag.mean_value_distance() if diag.value_distances else None,
    }
    p = atomic_write_text(story_dir / "diagnostics.json", json.dumps(info, indent=1) + "\n")
    hashes[str(p.relative_to(out))] = sha256_file(p)
    return hashes, {"timing": diag.timing, **{k: info[k] for k in ("ravm_sites", "mean_value_distance")}}


def run_generate(specs: Sequence[StoryboardSpec], config: BackendConfig, out: Path, *, composites: bool, command: str, inputs: dict) -> RunManifest:
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    outputs, per_story = {}, {}
    for spec in specs:
        hashes, info = generate_one(spec, config, out, composites)
        outputs.update(hashes)
        per_story[spec.story_id] = info
    manifest = RunManifest(
        command=command,
        config=config.to_dict(),
        seeds={s.story_id: s.seed for s in specs},
        inputs=inputs,
        outputs=outputs,
        times={"start": t0, "wall_s": time.time() - t0, "stories": {k: v.pop("timing") for k, v in per_story.items()}},
        extra={"specs": [s.to_dict() for s in specs], "composites": composites, "stories": per_story},
    )
    manifest.write(out / "manifest.json")
    return manifest


def cmd_generate(args) -> int:
    inputs = {}
    if args.from_manifest:
        m = RunManifest.read(args.from_manifest)
        specs = [StoryboardSpec.from_dict(s) for s in m.extra["specs"]]
        config = resolve_config(args, base=m.config)
        inputs["manifest"] = sha256_file(args.from_manifest)
        composites = args.composites or m.extra.get("composites", False)
    else:
        if args.spec is None:
            raise ConfigError("a spec file or --from-manifest is required")
        if not args.spec.exists():
            raise ConfigError(f"spec file {args.spec} not found")
        specs = load_specs(args.spec)
        config = resolve_config(args)
        inputs["spec"] = sha256_file(args.spec)
        if args.config:
            inputs["config"] = sha256_file(args.config)
        composites = args.composites
    if args.seed is not None:
        specs = [StoryboardSpec.from_dict({**s.to_dict(), "seed": args.seed}) for s in specs]
    command = " ".join(["generate", *map(str, args.argv)])

    if args.lambda_sweep:
        for lam in args.lambda_sweep:
            cfg = config.with_overrides(lam=lam)
            m = run_generate(specs, cfg, args.out / f"lambda_{lam:g}", composites=composites, command=command, inputs=inputs)
            print(f"lambda={lam:g}: {len(m.outputs)} files, digest {m.output_digest()[:12]}")
        return EXIT_OK
    m = run_generate(specs, config, args.out, composites=composites, command=command, inputs=inputs)
    print(f"wrote {len(m.outputs)} files to {args.out}, digest {m.output_digest()[:12]}")
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------

_PANEL = re.compile(r"^panel_(\d+)\.png$")


def load_storyboards(panels_dir: Path) -> dict:
    boards = {}
    if not panels_dir.is_dir():
        return boards
    for story_dir in sorted(p for p in panels_dir.iterdir() if p.is_dir()):
        files = sorted(
            ((int(m.group(1)), f) for f in story_dir.iterdir() if (m := _PANEL.match(f.name))),
        )
        if files:
            boards[story_dir.name] = [load_png(f) for _, f in files]
    return boards


def cmd_evaluate(args) -> int:
    t0 = time.time()
    entries = load_benchmark(args.benchmark)
    boards = load_storyboards(args.panels)
    missing = sorted(e.story_id for e in entries if e.story_id not in boards)
    if missing:
        raise BenchmarkLookupError(f"no panels in {args.panels} for: {', '.join(missing)}")
    scorers = []
    for metric in args.metrics:
        if metric == "scene_diversity":
            if args.annotations is None:
                raise ConfigError("scene_diversity needs --annotations")
            scorers.append(SceneDiversityScorer(FixtureDetector(args.annotations), args.threshold))
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    provenance = {
        "benchmark": sha256_file(args.benchmark),
        "annotations": sha256_file(args.annotations) if args.annotations else None,
    }
    gen_manifest = args.panels / "manifest.json"
    if gen_manifest.exists():
        m = RunManifest.read(gen_manifest)
        provenance["config_hash"] = sha256_json(m.config)
        provenance["seeds"] = m.seeds
    report = evaluate(boards, entries, scorers, provenance)
    atomic_write_text(args.out, report.to_json())
    RunManifest(
        command=" ".join(["evaluate", *map(str, args.argv)]),
        inputs=provenance,
        outputs={args.out.name: sha256_file(args.out)},
        times={"start": t0, "wall_s": time.time() - t0},
    ).write(args.out.with_name(args.out.name + ".manifest.json"))
    for name, mean in report.aggregates.items():
        print(f"{name}: mean {mean:.4f} over {len(report.scores[name])} stories")
    for name, failed in report.failures.items():
        print(f"{name}: {len(failed)} failed ({', '.join(sorted(failed))})")
    return EXIT_OK


# -- diagnose ----------------------------------------------------------------


def _anchor(text: str) -> tuple[str, int]:
    panel, _, idx = text.partition(":")
    if panel not in ("top", "bottom") or not idx.isdigit():
        raise argparse.ArgumentTypeError("anchor must look like bottom:27 or top:5")
    return panel, int(idx)


def cmd_diagnose(args) -> int:
    spec = load_specs(args.spec)[args.story_index]
    config = resolve_config(args)
    if not (0 <= args.step < config.steps and 0 <= args.block < config.blocks and 0 <= args.element < spec.n):
        raise ConfigError("step/block/element outside the run")
    hook = CaptureHook(config, args.element, args.step, args.block)
    run_storyboard(spec, config, extra_hooks=[hook])
    grid = (config.H_tok, config.W_tok)
    stem = args.out / f"{spec.story_id}_e{args.element}_s{args.step}_b{args.block}"
    written = [*write_diagnostic(stem.with_name(stem.name + "_keypca"), key_pca_map(hook.keys, grid),
                                 step=args.step, layer=args.block, grid=(2 * grid[0], grid[1]))]
    if hook.captured is not None and hook.captured.updates:
        heat = reciprocal_heatmap(hook.captured, args.anchor, grid)
        written += write_diagnostic(stem.with_name(stem.name + f"_heat_{args.anchor[0]}{args.anchor[1]}"),
                                    heat, step=args.step, layer=args.block, anchor=args.anchor, grid=grid)
    else:
        logger.warning("no reciprocal observations up to this site; heatmap skipped")
    for p in written:
        print(p)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panelboard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="split a story into reference + scene prompts")
    d.add_argument("story", type=Path)
    d.add_argument("--n", type=int, default=7)
    mode = d.add_mutually_exclusive_group()
    mode.add_argument("--live", action="store_true", help="call the chat-completion endpoint")
    mode.add_argument("--fixture", type=Path, help="directory of recorded replies")
    d.add_argument("--endpoint")
    d.add_argument("--model", default="gpt-4o")
    d.add_argument("--token-env", default=director.DEFAULT_TOKEN_ENV)
    d.add_argument("--record", type=Path, help="save live replies as fixtures here")
    d.add_argument("--reference", help="override the derived reference prompt")
    d.add_argument("--story-id")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", type=Path, required=True)
    d.set_defaults(func=cmd_decompose)

    g = sub.add_parser("generate", help="render storyboards on the toy backend")
    g.add_argument("spec", type=Path, nargs="?")
    g.add_argument("--from-manifest", type=Path)
    g.add_argument("--seed", type=int, help="override every storyboard's noise seed")
    g.add_argument("--lambda-sweep", type=_float_list, help="e.g. 1.0,0.5,0.0; one output dir per value")
    g.add_argument("--composites", action="store_true", help="also write uncropped two-panel images")
    g.add_argument("--out", type=Path, default=Path("out"))
    add_config_flags(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score generated storyboards")
    e.add_argument("panels", type=Path)
    e.add_argument("--benchmark", type=Path, required=True)
    e.add_argument("--annotations", type=Path)
    e.add_argument("--metrics", type=lambda s: s.split(","), default=["scene_diversity"])
    e.add_argument("--threshold", type=float, default=0.35)
    e.add_argument("--out", type=Path, default=Path("report.json"))
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("diagnose", help="export key-PCA and reciprocal heatmap images")
    x.add_argument("spec", type=Path)
    x.add_argument("--story-index", type=int, default=0)
    x.add_argument("--element", type=int, default=0)
    x.add_argument("--step", type=int, default=12)
    x.add_argument("--block", type=int, default=2)
    x.add_argument("--anchor", type=_anchor, default=("bottom", 0))
    x.add_argument("--out", type=Path, default=Path("diagnostics"))
    add_config_flags(x)
    x.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except director.DirectorTransportError as exc:
        logger.error("transport error: %s", exc)
        return EXIT_TRANSPORT
    except director.DirectorFormatError as exc:
        logger.error("%s\n--- raw reply ---\n%s", exc, exc.raw_reply)
        return EXIT_VALIDATION
    except BenchmarkValidationError as exc:
        for err in exc.errors:
            logger.error("validation: %s", err)
        return EXIT_VALIDATION
    except (ConfigError, director.DirectorConfigError, DetectorConfigError, BenchmarkParseError,
            BenchmarkLookupError, FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
