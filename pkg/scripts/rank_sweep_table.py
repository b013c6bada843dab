"""Print the rank-sweep separability table of a finished run as aligned text."""

import argparse
import json
from pathlib import Path


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("run_dir")
    args = p.parse_args()
    rows = json.loads((Path(args.run_dir) / "ranksweep.json").read_text())["rows"]
    ranks = sorted({r["rank"] for r in rows})
    layers = sorted({r["layer"] for r in rows})
    table = {(r["rank"], r["layer"]): r["separability"] for r in rows}
    print("layer " + "".join(f"{'r=' + str(k):>12}" for k in ranks))
    for l in layers:
        print(f"{l:>5} " + "".join(f"{table[(k, l)]:>12.3f}" for k in ranks))
    acc = {r["rank"]: r["accuracy"] for r in rows}
    print("acc   " + "".join(f"{acc[k]:>12.3f}" for k in ranks))


if __name__ == "__main__":
    main()
