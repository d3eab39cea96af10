"""
The command-line pipeline
=========================

gen -> train -> embed -> retrieve -> evaluate -> localize, each step
writing its outputs atomically plus a ``.run.json`` manifest. Running the
script twice with the same seeds gives byte-identical outputs in --f64 mode.
"""
import json
import subprocess
import sys
import tempfile
from pathlib import Path


def pix2map(*argv):
    proc = subprocess.run([sys.executable, "-m", "pix2map", *map(str, argv)], capture_output=True, text=True)
    if proc.returncode:
        raise SystemExit(proc.stderr)
    return json.loads(proc.stdout)


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    (root / "gen.cfg").write_text("grid_rows = 4\ngrid_cols = 6\nn_train = 48\nn_update = 8\nn_expand = 8\n")
    (root / "train.cfg").write_text("# small and quick\nlayers = 2\nembed_dim = 16\nepochs = 10\nlogit_scale = 10\n")

    print(pix2map("gen", "--config", root / "gen.cfg", "--seed", 0, "--out", root / "ds"))
    print(pix2map("train", root / "ds", "--config", root / "train.cfg", "--seed", 0, "--f64", "--out", root / "m.p2m"))
    print(pix2map("embed", root / "m.p2m", root / "ds", "--split", "train", "--f64", "--out", root / "lib"))
    res = pix2map("retrieve", root / "m.p2m", root / "lib", root / "ds", "--split", "map_update", "-k", 3,
                  "--f64", "--out", root / "ret.json", "--out-graphs", root / "top")
    print("first query:", res["queries"][0] if "queries" in res else res)
    print(pix2map("evaluate", root / "top", root / "ds" / "graphs"))
    print(pix2map("localize", root / "m.p2m", root / "ds", root / "ds", "--stride", 40, "--f64", "--out", root / "heat.csv"))
    print(pix2map("gradcheck", "--batches", 2, "--max-components", 4))
