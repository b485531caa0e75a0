"""Render key-PCA and reciprocal heatmaps for every block at one sampler step.

Usage: python scripts/attention_maps.py [spec.json] --step 12 --out maps/
"""
import argparse
from pathlib import Path

from panelboard.anchoring import load_specs
from panelboard.attention import key_pca_map, reciprocal_heatmap
from panelboard.backend import BackendConfig, CaptureHook, run_storyboard
from panelboard.export import write_diagnostic

DEFAULT_SPEC = Path(__file__).resolve().parents[1] / "src" / "panelboard" / "data" / "sailor3_spec.json"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("spec", type=Path, nargs="?", default=DEFAULT_SPEC)
    p.add_argument("--step", type=int, default=12)
    p.add_argument("--element", type=int, default=1)
    p.add_argument("--anchor", type=int, default=27, help="bottom token index")
    p.add_argument("--out", type=Path, default=Path("maps"))
    args = p.parse_args()

    spec = load_specs(args.spec)[0]
    config = BackendConfig()
    grid = (config.H_tok, config.W_tok)
    hooks = [CaptureHook(config, args.element, args.step, b) for b in range(config.blocks)]
    run_storyboard(spec, config, extra_hooks=hooks)
    for b, hook in enumerate(hooks):
        stem = args.out / f"s{args.step}_b{b}"
        write_diagnostic(stem.with_name(stem.name + "_keypca"), key_pca_map(hook.keys, grid),
                         step=args.step, layer=b, grid=(2 * grid[0], grid[1]))
        heat = reciprocal_heatmap(hook.captured, ("bottom", args.anchor), grid)
        write_diagnostic(stem.with_name(stem.name + "_heat"), heat,
                         step=args.step, layer=b, anchor=("bottom", args.anchor), grid=grid)
    print(f"wrote {2 * config.blocks} maps to {args.out}")


if __name__ == "__main__":
    main()
