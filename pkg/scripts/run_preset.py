"""Fit one config preset and print the per-boost table.

    python scripts/run_preset.py configs/planted10.yaml [--seed N] [--out DIR]
"""

import argparse
import time

import numpy as np

from lvboost import boosting as bo
from lvboost import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = cli.load_config(args.config).with_overrides(args.seed, args.out)
    data = cli.load_data(cfg)
    print(f"{'K':>2} {'move':>8} {'s_tilde':>12} {'ELBO':>12} {'se':>7} {'secs':>7}  indices")

    def show(r):
        print(f"{r.K:>2} {r.move:>8} {r.s_tilde:>12.4g} {r.elbo_after.value:>12.3f} "
              f"{r.elbo_after.std_error:>7.3f} {r.wall_time:>7.1f}  {list(r.indices)}", flush=True)

    t0 = time.perf_counter()
    result = bo.run_boosting(cfg.model.build(), data, cfg.sga, cfg.boost, np.random.default_rng(cfg.seed), show)
    manifest = cli.RunManifest.from_result(cfg, result, time.perf_counter() - t0)
    out = cli._out_dir(cfg.out)
    (out / "manifest.json").write_text(manifest.dumps())
    print(f"optimal K = {result.optimal_K}; manifest written to {out / 'manifest.json'}")


if __name__ == "__main__":
    main()
