"""Smoke test for the Python bindings.

Uses an installed ``entk_dmft_py`` when available; otherwise loads the shared
library built by ``cargo build --release -p entk-dmft-py``.
"""

import importlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("entk_dmft_py")
    except ImportError:
        pass
    candidates = [os.environ.get("ENTK_DMFT_PY_LIB", "")]
    for profile in ("release", "debug"):
        for name in ("libentk_dmft_py.so", "libentk_dmft_py.dylib", "entk_dmft_py.dll"):
            candidates.append(str(ROOT / "target" / profile / name))
    lib = next((c for c in candidates if c and Path(c).exists()), None)
    if lib is None:
        sys.exit("build the bindings first: cargo build --release -p entk-dmft-py")
    suffix = ".pyd" if lib.endswith(".dll") else ".so"
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, Path(tmp) / ("entk_dmft_py" + suffix))
    sys.path.insert(0, tmp)
    return importlib.import_module("entk_dmft_py")


def main():
    m = load()

    assert m.fluctuation_constants("relu") == (5.0, 5.0)
    assert m.fluctuation_constants("linear") == (2.0, 2.0)

    pair = [[1.0, 0.0], [0.0, 1.0]]
    dfa = m.lazy_kernel(pair, 2, "relu", "dfa")
    hebb = m.lazy_kernel(pair, 2, "relu", "hebb")
    fa0 = m.lazy_kernel(pair, 2, "relu", "rho_fa", rho=0.0)
    assert dfa == hebb == fa0
    gd = m.lazy_kernel(pair, 2, "relu", "gd")
    assert gd[0][0] > dfa[0][0]

    assert abs(m.two_layer_fixed_point(1.0, 1.5, "rho_fa", rho=0.0) - 2.0) < 1e-12
    assert abs(m.two_layer_fixed_point(1.0, 1.0, "gd") - math.sqrt(2.0)) < 1e-12
    tr = m.two_layer_trajectory(1.0, 1.5, 2001, 0.02, "rho_fa", rho=0.0)
    assert abs(tr["h_y"][-1] - 2.0) < 1e-6

    try:
        m.lazy_kernel(pair, 2, "relu", "rho_fa")
    except ValueError:
        pass
    else:
        raise AssertionError("missing rho accepted")

    cfg = {
        "network": {"depth": 1, "gamma0": 1.0, "activation": "linear"},
        "rule": {"tag": "gd"},
        "grid": {"steps": 101, "dt": 0.05},
    }
    with tempfile.TemporaryDirectory() as out:
        manifest = json.loads(m.run_experiment("exact2", json.dumps(cfg), out))
        assert manifest["outputs"][0]["file"] == "trajectory.csv"
        assert (Path(out) / "manifest.json").exists()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
