"""Mean (sd) normalized error per method and sweep value from result CSVs.

    python3 scripts/summarize.py results/I_vary_n.csv [more.csv ...]
"""
import sys
from collections import defaultdict

import numpy as np

from smart.io import read_results


def summarize(path):
    rows = read_results(path)
    cells = defaultdict(list)
    methods, values = [], []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
        if r["sweep_value"] not in values:
            values.append(r["sweep_value"])
        cells[r["method"], r["sweep_value"]].append(r["error"])
    name = rows[0]["sweep_name"] if rows else "?"
    print(f"\n{path}")
    print(f"{'method':<14}" + "".join(f"{name}={v:<14g}" for v in values))
    for m in methods:
        line = f"{m:<14}"
        for v in values:
            e = np.array(cells[m, v])
            ok = e[np.isfinite(e)]
            cell = f"{ok.mean():.4f}({ok.std():.4f})" if ok.size else "n/a"
            if ok.size < e.size:
                cell += f"!{e.size - ok.size}"
            line += f"{cell:<{len(name) + 15}}"
        print(line)


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    for p in sys.argv[1:]:
        summarize(p)
