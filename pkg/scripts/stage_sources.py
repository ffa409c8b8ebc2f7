"""Stage MNIST and Fashion-MNIST into <data_root>/raw/ from npm tarballs.

    python scripts/stage_sources.py [--root DIR] [--npm-dir DIR]

Uses ``npm pack`` to fetch the 'mnist-data' (raw IDX files) and
'fashion-mnist' (per-class JSON) packages when the tarballs are not already
present in --npm-dir.  Fashion-MNIST JSON holds 7000 images per class with
no split marker; the first 6000 of each class become the train split and the
remaining 1000 the test split.
"""

import argparse
import json
import shutil
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from ctxshift.sources import data_root, write_idx


def _pack(name: str, npm_dir: Path) -> Path:
    found = sorted(npm_dir.glob(f"{name}-[0-9]*.tgz"))
    if found:
        return found[-1]
    subprocess.run(["npm", "pack", name], cwd=npm_dir, check=True, capture_output=True)
    return sorted(npm_dir.glob(f"{name}-[0-9]*.tgz"))[-1]


def stage_mnist(tgz: Path, dest: Path) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    with tarfile.open(tgz) as tar:
        for member in tar.getmembers():
            if member.name.startswith("package/data/") and member.isfile():
                with tar.extractfile(member) as src, open(dest / Path(member.name).name, "wb") as dst:
                    shutil.copyfileobj(src, dst)


def stage_fashion(tgz: Path, dest: Path, train_per_class: int = 6000) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "test": ([], [])}
    with tarfile.open(tgz) as tar:
        for k in range(10):
            rows = json.load(tar.extractfile(f"package/src/clothes/{k}.json"))["data"]
            arr = np.asarray([r for r in rows if len(r) == 784], dtype=np.uint8).reshape(-1, 28, 28)
            for split, part in (("train", arr[:train_per_class]), ("test", arr[train_per_class:])):
                splits[split][0].append(part)
                splits[split][1].append(np.full(len(part), k, dtype=np.uint8))
    prefix = {"train": "train", "test": "t10k"}
    for split, (imgs, lbls) in splits.items():
        write_idx(dest / f"{prefix[split]}-images-idx3-ubyte", np.concatenate(imgs))
        write_idx(dest / f"{prefix[split]}-labels-idx1-ubyte", np.concatenate(lbls))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default=None)
    parser.add_argument("--npm-dir", default=None)
    args = parser.parse_args()
    raw = data_root(args.root) / "raw"
    with tempfile.TemporaryDirectory() as tmp:
        npm_dir = Path(args.npm_dir or tmp)
        stage_mnist(_pack("mnist-data", npm_dir), raw / "mnist")
        stage_fashion(_pack("fashion-mnist", npm_dir), raw / "fashion-mnist")
    print(f"staged mnist and fashion-mnist under {raw}")


if __name__ == "__main__":
    main()
