"""Print how far bottom-panel values sit from their top partners across a lambda sweep.

Usage: python scripts/lambda_sweep.py [spec.json] [--lambdas 1,0.75,0.5,0.25,0]
"""
import argparse
from pathlib import Path

from panelboard.anchoring import load_specs
from panelboard.backend import BackendConfig, run_storyboard

DEFAULT_SPEC = Path(__file__).resolve().parents[1] / "src" / "panelboard" / "data" / "sailor3_spec.json"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("spec", type=Path, nargs="?", default=DEFAULT_SPEC)
    p.add_argument("--lambdas", default="1,0.75,0.5,0.25,0")
    p.add_argument("--steps", type=int, default=28)
    args = p.parse_args()

    spec = load_specs(args.spec)[0]
    print(f"{'lambda':>7} {'distance':>9} {'mean |C|':>9}")
    for lam in (float(x) for x in args.lambdas.split(",")):
        diag = run_storyboard(spec, BackendConfig(lam=lam, steps=args.steps)).diagnostics
        s = diag.summary()
        print(f"{lam:7.2f} {s['mean_value_distance']:9.4f} {s['mean_correspondence_size']:9.2f}")


if __name__ == "__main__":
    main()
