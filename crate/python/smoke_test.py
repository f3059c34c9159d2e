"""Smoke test for the rdi_py extension.

Builds the extension with cargo when it is not importable, then exercises the
config, kernel, schedule and end-to-end entry points.
"""

import importlib.util
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import rdi_py

        return rdi_py
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "rdi-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    suffix = {"darwin": "dylib", "win32": "dll"}.get(sys.platform, "so")
    built = ROOT / "target" / "release" / f"librdi_py.{suffix}"
    if sys.platform == "win32":
        built = ROOT / "target" / "release" / "rdi_py.dll"
    out = pathlib.Path(tempfile.mkdtemp()) / ("rdi_py.pyd" if sys.platform == "win32" else "rdi_py.so")
    shutil.copy(built, out)
    spec = importlib.util.spec_from_file_location("rdi_py", out)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def check_kernels(rdi):
    # 2x2 map, 2 channels; class 0 points along x, class 1 along y.
    fmap = rdi.FeatureMap(2, 2, 2, [1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.2, 0.8])
    clf = rdi.Classifier([[1.0, 0.0], [0.0, 1.0]], 16.0)
    alr = rdi.alr_mask(fmap, clf, 0, 0.5)
    assert alr.kind == "ALR" and alr.bits == [True, True, False, False], alr.bits
    ali = rdi.ali_mask(alr)
    assert [a + b for a, b in zip(alr.bits, ali.bits)] == [1, 1, 1, 1]
    pooled = rdi.masked_pool(fmap, alr)
    assert all(math.isclose(p, q) for p, q in zip(pooled, [0.95, 0.05]))
    with_dummy = clf.with_dummy(7)
    assert (with_dummy.classes, with_dummy.real_classes) == (3, 2)
    cfg = rdi.Config()
    loss = rdi.total_loss([fmap], [0], with_dummy, cfg)
    assert math.isfinite(loss) and loss > 0.0


def check_config(rdi):
    cfg = rdi.Config.from_toml("seed = 3\n[rdi]\nlambda = 0.5\n")
    assert cfg.seed == 3 and cfg.lambda_ == 0.5
    again = rdi.Config.from_toml(cfg.to_toml())
    assert again.to_toml() == cfg.to_toml()
    try:
        rdi.Config.from_toml("[rdi]\nbeta = -1.0\n")
    except rdi.ConfigError as e:
        assert "rdi.beta" in str(e)
    else:
        raise AssertionError("negative beta accepted")


def check_plans(rdi):
    assert rdi.session_plan("cifar100") == list(range(60, 101, 5))
    assert rdi.session_plan("cub200") == list(range(100, 201, 10))


def check_run(rdi):
    cfg = rdi.Config.from_toml(
        """
name = "py-smoke"
[data]
base_classes = 3
sessions = 2
way = 1
shot = 2
[data.synthetic]
image_size = 16
class_count = 5
samples_per_class = 6
test_samples_per_class = 3
signal_patch_size = 6
nuisance_patch_size = 6
[model]
input_size = 16
widths = [4, 4, 8, 8]
[protocol]
base_epochs = 1
rdi_epochs = 1
"""
    )
    with tempfile.TemporaryDirectory() as root:
        result = rdi.run_experiment(cfg, root)
        assert len(result.sessions) == 3
        assert (pathlib.Path(result.dir) / "metrics.csv").exists()
        assert 0.0 <= result.average_accuracy <= 1.0


def main():
    rdi = load_module()
    check_kernels(rdi)
    check_config(rdi)
    check_plans(rdi)
    check_run(rdi)
    print("rdi_py smoke test passed")


if __name__ == "__main__":
    main()
