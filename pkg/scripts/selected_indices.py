"""Print the latent indices selected at each boost of a saved fit as CSV rows.

    python scripts/selected_indices.py runs/planted10/manifest.json
"""

import argparse
import csv
import sys

from lvboost import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("manifest")
    args = ap.parse_args()
    m = cli.read_manifest(args.manifest)
    w = csv.writer(sys.stdout)
    w.writerow(["K", "move", "s_tilde", "elbo", "index"])
    for r in m.records:
        for i in r["indices"] or [""]:
            w.writerow([r["K"], r["move"], repr(r["s_tilde"]), repr(r["elbo_after"]["value"]), i])


if __name__ == "__main__":
    main()
