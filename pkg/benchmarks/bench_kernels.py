"""Compare the compiled and numpy convolution kernels on model-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each row times forward and backward for one layer shape, checks that both
backends agree, and reports the speedup of the compiled kernels.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from msaff.numerics import kernels

# (name, kind, input shape, weight shape, stride, padding)
WORKLOADS = [
    ("sil conv1 30x1x64x44", "conv2d", (30, 1, 64, 44), (32, 1, 3, 3), 1, 1),
    ("sil conv2 30x32x64x44", "conv2d", (30, 32, 64, 44), (64, 32, 3, 3), 1, 1),
    ("sil conv3 30x64x32x22", "conv2d", (30, 64, 32, 22), (128, 64, 3, 3), 1, 1),
    ("micro conv 24x4x16x12", "conv2d", (24, 4, 16, 12), (8, 4, 3, 3), 1, 1),
    ("temporal 1x30x128x96 k3", "temporal", (1, 30, 128, 96), (96, 128, 128, 3), None, 1),
    ("temporal 8x8x8x12 k3", "temporal", (8, 8, 8, 12), (12, 8, 8, 3), None, 1),
]


def _calls(mod, kind, x, w, stride, padding):
    if kind == "conv2d":
        y = mod.conv2d_forward(x, w, stride, padding)
        return (lambda: mod.conv2d_forward(x, w, stride, padding),
                lambda: mod.conv2d_backward(x, w, np.ones_like(y), stride, padding), y)
    y = mod.temporal_conv_forward(x, w, padding)
    return (lambda: mod.temporal_conv_forward(x, w, padding),
            lambda: mod.temporal_conv_backward(x, w, np.ones_like(y), padding), y)


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int = 5, workloads=WORKLOADS) -> list[dict]:
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    rows = []
    for name, kind, xs, ws, stride, padding in workloads:
        x, w = rng.normal(size=xs), rng.normal(size=ws)
        row = {"workload": name}
        outputs = {}
        for bname, mod in backends.items():
            fwd, bwd, outputs[bname] = _calls(mod, kind, x, w, stride, padding)
            row[f"{bname}_fwd_ms"] = 1e3 * _best(fwd, repeat)
            row[f"{bname}_bwd_ms"] = 1e3 * _best(bwd, repeat)
        if "cython" in outputs:
            row["max_abs_diff"] = float(np.abs(outputs["cython"] - outputs["python"]).max())
            row["speedup"] = ((row["python_fwd_ms"] + row["python_bwd_ms"])
                              / (row["cython_fwd_ms"] + row["cython_bwd_ms"]))
        rows.append(row)
    return rows


def format_rows(rows) -> str:
    compiled = "speedup" in rows[0]
    head = f"{'workload':<26} {'py fwd':>9} {'py bwd':>9}"
    if compiled:
        head += f" {'cy fwd':>9} {'cy bwd':>9} {'speedup':>8} {'max diff':>9}"
    lines = [head + "   (ms, best of repeats)"]
    for r in rows:
        line = f"{r['workload']:<26} {r['python_fwd_ms']:9.2f} {r['python_bwd_ms']:9.2f}"
        if compiled:
            line += (f" {r['cython_fwd_ms']:9.2f} {r['cython_bwd_ms']:9.2f} {r['speedup']:7.2f}x"
                     f" {r['max_abs_diff']:9.1e}")
        lines.append(line)
    if not compiled:
        lines.append("compiled extension not importable; only the numpy backend was timed")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write the rows to this file")
    args = parser.parse_args(argv)
    rows = run(args.repeat)
    print(f"active backend: {kernels.BACKEND}")
    print(format_rows(rows))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
