"""Put GunPoint in UCR tab-separated layout under data/GunPoint.

The UCR archive site needs a browser download, but the sktime wheel on PyPI
bundles GunPoint in its ``.ts`` format. This pulls the wheel with pip (no
install) and converts the two splits.

    python scripts/fetch_gunpoint.py [--out data/GunPoint]
"""
from __future__ import annotations

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL_SPEC = "sktime==1.2.0"
MEMBER = "sktime/datasets/data/GunPoint/GunPoint_{split}.ts"


def ts_to_rows(text: str) -> list[str]:
    rows, in_data = [], False
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.lower() == "@data":
            in_data = True
            continue
        if in_data:
            values, label = line.rsplit(":", 1)
            rows.append("\t".join([label] + values.split(",")))
    return rows


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "GunPoint")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps",
                        "--timeout", "60", "-d", tmp], check=True)
        wheel = next(Path(tmp).glob("*.whl"))
        args.out.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(wheel) as z:
            for split in ("TRAIN", "TEST"):
                rows = ts_to_rows(z.read(MEMBER.format(split=split)).decode())
                (args.out / f"GunPoint_{split}.tsv").write_text("\n".join(rows) + "\n")
                print(f"{split}: {len(rows)} series -> {args.out / f'GunPoint_{split}.tsv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
