"""Region labels for the five-pointed star on a coarse grid, drawn as text.

    python3 demos/regions_2d.py [n]
"""
import sys

from defuse.geometry import GridSpec, Label
from defuse.problems import get_problem, region_map

GLYPH = {Label.OMEGA1: "-", Label.OMEGA2: "+", Label.BAND_MINUS: "b", Label.BAND_PLUS: "B",
         Label.GAMMA_MINUS: "g", Label.GAMMA_PLUS: "G", Label.OUTER_BOUNDARY: "#"}

if __name__ == "__main__":
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 40
    problem = get_problem("ex4_8")
    rmap = region_map(problem, GridSpec.uniform(problem.bounds, n))
    for j in reversed(range(n + 1)):
        print("".join(GLYPH[Label(rmap.labels[i, j])] for i in range(n + 1)))
    print(", ".join(f"{lab.text}={rmap.count(lab)}" for lab in Label), f"pairs={len(rmap.node_pairs)}")
