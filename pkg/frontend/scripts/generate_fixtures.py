"""Regenerate the client/server spline contract fixtures.

Run from the repository root after any change to the server-side contour
densification:

    python3 frontend/scripts/generate_fixtures.py
"""

import json
import os

import numpy as np

from carotidkit.contours import ClosedSplineContour, evaluate_contour

OUT = os.path.join(os.path.dirname(__file__), "..", "fixtures",
                   "spline_contract.json")
SAMPLES_PER_SEGMENT = 32


def random_contour(rng):
    n = int(rng.integers(4, 17))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(2.0, 8.0, n)
    seeds = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    seeds += rng.uniform(-3, 3, 2)
    return ClosedSplineContour(seeds=seeds)


def main():
    rng = np.random.default_rng(42)
    cases = []
    for _ in range(20):
        c = random_contour(rng)
        poly = evaluate_contour(c, SAMPLES_PER_SEGMENT)
        cases.append({
            "seeds": [[float(u), float(v)] for u, v in c.seeds],
            "samples_per_segment": SAMPLES_PER_SEGMENT,
            "polyline": [[float(u), float(v)] for u, v in poly],
        })
    with open(os.path.abspath(OUT), "w") as f:
        json.dump({"cases": cases}, f)
    print(f"{len(cases)} cases -> {os.path.abspath(OUT)}")


if __name__ == "__main__":
    main()
