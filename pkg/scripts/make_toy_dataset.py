"""Write procedural toy buildings as OBJ meshes (the CLI's data directory)."""
import argparse
from pathlib import Path

from buildabs.io import write_obj
from buildabs.toy import toy_buildings


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("-n", type=int, default=10, help="number of buildings")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for iid, mesh in toy_buildings(args.n, args.seed):
        write_obj(out / f"{iid}.obj", mesh)
    print(f"wrote {args.n} meshes to {out}")


if __name__ == "__main__":
    main()
