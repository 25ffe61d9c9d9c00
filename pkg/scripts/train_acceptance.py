"""Train (or load from cache) every desk-scale model and print its held-out scores.

    python scripts/train_acceptance.py            # all recipes
    python scripts/train_acceptance.py cond_p     # selected ones
"""

import argparse
import time

from motionlab import experiments as X


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help=f"recipes to build (default: all of {', '.join(X.RECIPES)})")
    args = ap.parse_args()
    unknown = sorted(set(args.names) - set(X.RECIPES))
    if unknown:
        ap.error(f"unknown recipes: {', '.join(unknown)}")
    for name in args.names or list(X.RECIPES):
        start = time.time()
        model = X.ensure_model(name)
        clips = X.heldout(name)
        line = f"{name:10s} psnr {X.heldout_psnr(model, clips):7.3f}"
        if model.cfg.dba:
            moving, still = X.importance_split(model, clips)
            line += f"  bpp {X.heldout_bpp(model, clips):.5f}  Q moving {moving:.3f} still {still:.3f}"
        if X.RECIPES[name].cfg.synth == "translate":
            line += f"  flow epe {X.heldout_flow_epe(model, clips):.5f}"
        print(f"{line}  ({time.time() - start:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
