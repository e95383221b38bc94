"""Op-count scaling of accumulation and of a full tree layer on balanced trees."""

import argparse

from treeattn.bench import bench_accumulation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", default="128,256,512,1024")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rep = bench_accumulation([int(x) for x in args.lengths.split(",")], repeats=args.repeats)
    print(rep.to_csv(), end="")
    for key in ("accumulate_ops", "layer_ops"):
        print(f"# {key} doubling ratios:", ", ".join(f"{n}->{2 * n}: {r:.3f}" for n, r in rep.ratios(key)))
    print(f"# fit ops ~ {rep.fit_c:.1f} * n log2 n, max residual {rep.max_residual:.2%}")


if __name__ == "__main__":
    main()
