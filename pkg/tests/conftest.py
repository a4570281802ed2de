import json
from pathlib import Path

from xlsor.cli import main

PIPELINE_CONFIG = {
    "data": {"H": 32, "W": 32, "n_phantoms": 20, "seed": 4, "test_corruption": {"intensity": 0.7, "seed": 9}},
    "augment": {"n_normal": 3, "per_normal": 2, "seed": 5},
    "model": {"seed": 1, "input_size": [32, 32], "base_channels": 4},
    "train": {"seed": 2, "max_iter": 12, "batch_size": 2, "val_every": 6},
    "eval": {"threshold": 0.5},
}


def run_pipeline(root, config=PIPELINE_CONFIG):
    """gen-data, train, augment, retrain, eval and bench under ``root``; returns exit codes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.json"
    cfg.write_text(json.dumps(config))
    steps = [
        ["gen-data", "--config", cfg, "--out", root / "data"],
        ["train", "--config", cfg, "--data", root / "data", "--out", root / "r.xlsr"],
        ["augment", "--config", cfg, "--checkpoint", root / "r.xlsr", "--data", root / "data",
         "--out", root / "aug"],
        ["train", "--config", cfg, "--data", root / "data", "--aug", root / "aug", "--out", root / "ra.xlsr"],
        ["eval", "--checkpoint", root / "ra.xlsr", "--data", root / "data", "--config", cfg,
         "--out", root / "report.json"],
        ["bench", "--sizes", "4,8", "--channels", "8", "--repeats", "1", "--out", root / "bench.json"],
    ]
    return [main([str(a) for a in step]) for step in steps]


# ------------------------------------------------------------ acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    failed = call.excinfo is not None
    if call.when == "setup" and not failed:
        return
    prev = _CRITERIA.get(number, (title, True, ""))
    detail = getattr(item, "acceptance_detail", "")
    _CRITERIA[number] = (title, prev[1] and not failed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
