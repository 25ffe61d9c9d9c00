"""Rate-distortion points for block codecs and the cached learned models.

Learned points come from the desk-scale recipes (trained on first use, see
scripts/train_acceptance.py). All points are scored on the same held-out
two_objects clips.

    python scripts/rd_points.py --output rd.csv
"""

import argparse

from motionlab import experiments as X
from motionlab import harness as H

LEARNED = ("cond_none", "cond_p", "rate_lam0", "rate_lam", "rate_local")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clips", type=int, default=X.HELDOUT_CLIPS)
    ap.add_argument("--no-learned", action="store_true", help="block codecs only")
    ap.add_argument("--output")
    args = ap.parse_args()

    common = dict(synth="two_objects", clips=args.clips, seed=X.HELDOUT_SEED)
    configs = [H.RunConfig(**common, algorithm=alg, mb=mb, mvd=mvd)
               for mb in (16, 8) for alg in ("ES", "DS", "ARPS") for mvd in (False, True)]
    if not args.no_learned:
        for name in LEARNED:
            X.ensure_model(name)
            recipe = X.RECIPES[name].cfg
            configs.append(recipe.replace(**common, checkpoint=str(X.checkpoint_path(name))))
    print(H.rd_sweep(configs, args.output), end="")


if __name__ == "__main__":
    main()
