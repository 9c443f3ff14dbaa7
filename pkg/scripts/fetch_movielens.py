"""Download MovieLens-100k and convert it to data/ml-100k/*.csv.

The GroupLens licence forbids redistribution, so the data is fetched on
demand.  The files are taken from the RecBole wheel (version pinned), which
bundles ML-100k in its atomic format; ``--source`` points at a directory that
already holds ``ml-100k.inter``/``.item``/``.user`` instead.

    python scripts/fetch_movielens.py [--out data/ml-100k] [--source DIR]
"""

import argparse
import json
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

from purs.datasets import convert_movielens

WHEEL = "recbole==1.2.1"
MEMBERS = ("ml-100k.inter", "ml-100k.item", "ml-100k.user")
PREFIX = "recbole/dataset_example/ml-100k/"


def fetch_raw(dest: Path) -> Path:
    """Pull the pinned wheel with pip and extract the three atomic files."""
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", WHEEL, "--no-deps", "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            for name in MEMBERS:
                (dest / name).write_bytes(zf.read(PREFIX + name))
    return dest


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "ml-100k"))
    ap.add_argument("--source", help="directory with the atomic ml-100k files (skips the download)")
    args = ap.parse_args(argv)
    if args.source:
        stats = convert_movielens(args.source, args.out)
    else:
        with tempfile.TemporaryDirectory() as raw:
            stats = convert_movielens(fetch_raw(Path(raw)), args.out)
    print(json.dumps({"out": args.out, **stats}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
