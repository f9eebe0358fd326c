#!/usr/bin/env python3
"""Writes establishments.csv: synthetic business-survey records.

Four size classes on the log scale, correlated receipts/payroll/employees,
a few zero payrolls, scattered item gaps, and unit nonresponse that is more
common among the largest establishments.
"""
import math
import random

CLASSES = [  # weight, log receipts, log payroll, log employees, sd
    (0.40, 5.0, 4.0, 1.5, 0.45),
    (0.30, 6.5, 5.6, 2.8, 0.40),
    (0.20, 8.0, 7.1, 4.0, 0.35),
    (0.10, 9.6, 8.8, 5.4, 0.30),
]
RESPONSE = [0.80, 0.75, 0.65, 0.45]


def main(n=600, seed=20240611, path="establishments.csv"):
    rng = random.Random(seed)
    weights = [c[0] for c in CLASSES]
    lines = ["receipts,payroll,employees,respond"]
    for _ in range(n):
        k = rng.choices(range(len(CLASSES)), weights)[0]
        _, r, p, e, sd = CLASSES[k]
        common = rng.gauss(0, sd)
        receipts = math.exp(r + common + rng.gauss(0, sd / 2))
        payroll = math.exp(p + 0.9 * common + rng.gauss(0, sd / 2))
        employees = round(math.exp(e + 0.8 * common + rng.gauss(0, sd / 2)))
        if rng.random() < 0.03:
            payroll = 0.0
        cells = [f"{receipts:.1f}", f"{payroll:.1f}", str(max(employees, 1))]
        respond = rng.random() < RESPONSE[k]
        if respond:
            for j in range(3):
                if rng.random() < 0.02:
                    cells[j] = ""
            if all(c == "" for c in cells):
                cells[0] = f"{receipts:.1f}"
        lines.append(",".join(cells + ["1" if respond else "0"]))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
