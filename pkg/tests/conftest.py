import hashlib
import os
import pathlib

import numpy as np
import pytest

# every autograd op checks its output for NaN/inf during tests
os.environ.setdefault("TAILPCC_CHECK_FINITE", "1")

from tailpcc.config import RunConfig  # noqa: E402
from tailpcc.geometry import estimate_normals  # noqa: E402
from tailpcc.harness import alpha_grid, cmd_train, evaluate_cloud, load_checkpoint, resolve_dataset  # noqa: E402

SRC = pathlib.Path(__file__).resolve().parents[1] / "src" / "tailpcc"

# the toy run behind the directional acceptance criteria
TOY_FLAT = {
    "data.count": 64,
    "data.points": 2048,
    "data.seed": 0,
    "data.test_count": 8,
    "train.epochs": 50,
    "train.batch_size": 4,
    "train.lambda": 1e-3,
}


def toy_run(strategy: str = "combined") -> RunConfig:
    return RunConfig.from_flat({**TOY_FLAT, "drop.strategy": strategy})


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC.rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _trained(request, strategy):
    """Train (or reuse a checkpoint trained by identical code and config)."""
    run = toy_run(strategy)
    key = hashlib.sha256((_source_digest() + repr(sorted(run.to_flat().items()))).encode()).hexdigest()[:16]
    cache = pathlib.Path(request.config.cache.mkdir("toy-models"))
    path = cache / f"{strategy}-{key}.tpck"
    if not path.exists():
        for stale in cache.glob(f"{strategy}-*"):
            stale.unlink()
        cmd_train(run, str(path) + ".partial", log_path=str(path) + ".log.csv")
        os.replace(str(path) + ".partial", path)
    return load_checkpoint(path), path


@pytest.fixture(scope="session")
def toy_combined(request):
    return _trained(request, "combined")


@pytest.fixture(scope="session")
def toy_feature_only(request):
    return _trained(request, "feature_only")


@pytest.fixture(scope="session")
def toy_test_split():
    _, test = resolve_dataset(toy_run())
    return [estimate_normals(pc) for pc in test]


@pytest.fixture(scope="session")
def toy_sweep(toy_combined, toy_feature_only, toy_test_split):
    """RD rows for both toy models over every test cloud and every ratio k/C."""
    rows = []
    for ck, _ in (toy_combined, toy_feature_only):
        for pc in toy_test_split:
            rows.extend(evaluate_cloud(ck.model, pc, ck.run, alpha_grid(ck.model.cfg.C), pc.source_id))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ----------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    verdicts, notes = {}, {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            props = dict(getattr(rep, "user_properties", ()))
            cid = props.get("criterion")
            if cid is None or getattr(rep, "when", None) not in ("setup", "call"):
                continue
            ok = not rep.failed and not rep.skipped
            if rep.when == "call" or not ok:
                verdicts[cid] = verdicts.get(cid, True) and ok
            if "detail" in props:
                notes.setdefault(cid, []).append(props["detail"])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(verdicts, key=lambda c: int(c[1:])):
        line = f"{cid} {'PASS' if verdicts[cid] else 'FAIL'}"
        terminalreporter.write_line("  ".join([line, *notes.get(cid, [])]))
