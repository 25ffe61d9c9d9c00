"""Rate, quality and search cost of every block-matching algorithm.

Runs the block codec on synthetic two_objects clips for both macroblock
sizes and prints one CSV row per (algorithm, mb) with the mean candidate
evaluations per block and the encode time.

    python scripts/block_table.py --clips 8 --output block_table.csv
"""

import argparse

import numpy as np

from motionlab import harness as H
from motionlab.blockmotion import ALGORITHMS, block_search
from motionlab.metrics import report_csv, write_text_atomic

COLUMNS = ("algorithm", "mb", "bpp", "psnr", "ssim", "evals_per_block", "encode_s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--synth", default="two_objects")
    ap.add_argument("--clips", type=int, default=4)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--output")
    args = ap.parse_args()

    base = H.RunConfig(synth=args.synth, clips=args.clips, width=args.size, height=args.size, timing=True)
    clips = H.load_clips(base)
    rows = []
    for mb in (8, 16):
        for alg in ALGORITHMS:
            cfg = base.replace(algorithm=alg, mb=mb)
            res = H.run_bench(cfg, clips)
            # candidate counts come from a direct search over the original frames
            evals = [
                block_search(a, b, alg, mb, cfg.p).eval_counts.mean()
                for _, clip in clips
                for a, b in zip(clip.frames[:-1], clip.frames[1:])
            ]
            rows.append({
                "algorithm": alg,
                "mb": mb,
                "bpp": res.mean("bpp"),
                "psnr": res.mean("psnr"),
                "ssim": res.mean("ssim"),
                "evals_per_block": float(np.mean(evals)),
                "encode_s": res.mean("encode_s"),
            })
    text = report_csv(rows, COLUMNS)
    if args.output:
        write_text_atomic(args.output, text)
    print(text, end="")


if __name__ == "__main__":
    main()
