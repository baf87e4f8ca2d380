"""Seeds 0..9 for the full model and its four ablations at K_spt=3, and the full
model at K_spt=1, on the default synthetic corpus.  Results land in runs/."""
import argparse
import logging
import time

from metags.metrics import pretty_table
from metags.scenarios import ABLATIONS, ExtractorPool, mean_metric, sweep
from metags.synthgen import GeneratorConfig, generate_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="runs")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    corpus = generate_corpus(GeneratorConfig())
    pool = ExtractorPool(corpus, f"{args.root}/cache")
    t0 = time.time()
    rows = []
    for variant in ("full",) + ABLATIONS:
        runs = sweep(corpus, args.root, [variant], range(args.seeds), pool=pool)[variant]
        rows.append({"variant": variant, "K_spt": 3, "Acc": mean_metric(runs), "F1": mean_metric(runs, "F1")})
    k1 = sweep(corpus, args.root, ["full"], range(args.seeds), k_spt=1, pool=pool)["full"]
    rows.append({"variant": "full", "K_spt": 1, "Acc": mean_metric(k1), "F1": mean_metric(k1, "F1")})
    print(pretty_table(rows, ["variant", "K_spt"]))
    print(f"{time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
