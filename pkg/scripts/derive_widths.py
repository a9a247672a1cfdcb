"""Search channel widths and accounting conventions that reproduce the reference parameter counts.

Closed-form counts are enumerated over candidate widths, head sizes and
whether batch-normalisation scale/shift terms are included. The winning
configuration is then instantiated and counted with the real builders.

    python scripts/derive_widths.py [--markdown docs/parameter_counts.md]
"""

from __future__ import annotations

import argparse
import itertools

from cascadeseg.networks import build_sw_cnn, build_unet_d, build_unet_s, parameter_count

TARGETS = {"SW-CNN": 220_826, "U-Net-D": 31_031_745, "U-Net-S": 1_862_849}


def conv(cin, cout, k):
    return cin * cout * k * k + cout


def unet_count(depth, base, head_channels, bn):
    widths = [base * 2**d for d in range(depth + 1)]
    total, cin, bn_terms = 0, 3, 0
    for w in widths:
        total += conv(cin, w, 3) + conv(w, w, 3)
        bn_terms += 4 * w
        cin = w
    for d in range(depth - 1, -1, -1):
        w = widths[d]
        total += conv(cin, w, 2)  # 2x2 up-convolution halves the channels
        total += conv(2 * w, w, 3) + conv(w, w, 3)
        bn_terms += 4 * w
        cin = w
    total += conv(cin, head_channels, 1)
    return total + (bn_terms if bn else 0)


def sw_count(width, fc, bn, size=95, kernels=(4, 5, 4, 4)):
    total, cin = 0, 3
    for k in kernels:
        total += conv(cin, width, k) + (2 * width if bn else 0)
        cin = width
        size = (size - k + 1) // 2
    return total + (cin * size * size + 1) * fc + (fc + 1) * 2


def search():
    rows = []
    for name, depth in (("U-Net-D", 4), ("U-Net-S", 2)):
        for base, head, bn in itertools.product(range(8, 129), (1, 2), (False, True)):
            n = unet_count(depth, base, head, bn)
            rows.append((name, f"base {base}, {head}-channel head, BN {'in' if bn else 'out'}", n))
    for width, bn in itertools.product(range(8, 129), (False, True)):
        n = sw_count(width, 200, bn)
        rows.append(("SW-CNN", f"width {width}, fc 200, BN {'in' if bn else 'out'}", n))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--markdown", help="write the result table to this file")
    args = ap.parse_args()
    rows = search()
    lines = ["| network | target | configuration | count | difference |", "|---|---|---|---|---|"]
    for name, target in TARGETS.items():
        best = sorted((r for r in rows if r[0] == name), key=lambda r: abs(r[2] - target))[:3]
        for _, desc, n in best:
            lines.append(f"| {name} | {target:,} | {desc} | {n:,} | {n - target:+,} |")
    built = {
        "SW-CNN": parameter_count(build_sw_cnn()),
        "U-Net-D": parameter_count(build_unet_d()),
        "U-Net-S": parameter_count(build_unet_s()),
    }
    lines.append("")
    lines.append("Counted on the instantiated default builders (convolution and dense layers only):")
    lines.append("")
    for name, n in built.items():
        lines.append(f"- {name}: {n:,} ({'exact' if n == TARGETS[name] else f'{n - TARGETS[name]:+,}'})")
    text = "\n".join(lines)
    print(text)
    if args.markdown:
        with open(args.markdown, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
