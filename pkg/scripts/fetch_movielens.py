"""Fetch MovieLens-100k ratings into data/ml-100k.tsv (user, item, rating).

grouplens.org is tried first; if it is unreachable the copy bundled in the
RecBole wheel is pulled through pip instead. The data stays local: its
license does not allow redistribution.
"""
import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
DEFAULT_OUT = Path(__file__).resolve().parent.parent / "data" / "ml-100k.tsv"


def from_grouplens(timeout=20):
    with urllib.request.urlopen(GROUPLENS, timeout=timeout) as resp:
        z = zipfile.ZipFile(io.BytesIO(resp.read()))
    lines = z.read("ml-100k/u.data").decode().splitlines()
    return [ln.split("\t")[:3] for ln in lines if ln.strip()]


def from_recbole_wheel():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                        "recbole==1.2.1", "-d", tmp], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        z = zipfile.ZipFile(wheel)
        text = z.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    lines = text.splitlines()[1:]  # header: user_id:token item_id:token rating:float ...
    return [ln.split("\t")[:3] for ln in lines if ln.strip()]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args(argv)
    try:
        rows = from_grouplens()
    except Exception as exc:  # noqa: BLE001 - any network failure falls through
        print(f"grouplens unavailable ({exc}); using the RecBole wheel", file=sys.stderr)
        rows = from_recbole_wheel()
    if len(rows) != 100_000:
        sys.exit(f"expected 100000 ratings, got {len(rows)}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for u, i, r in rows:
            fh.write(f"{u}\t{i}\t{float(r):g}\n")
    print(f"wrote {len(rows)} ratings to {args.out}")


if __name__ == "__main__":
    main()
