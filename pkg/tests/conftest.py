from pathlib import Path

import pytest

from regdec import cli

ROOT = Path(__file__).resolve().parents[1]
BUNDLED = ROOT / "configs" / "bundled.ini"

TINY_INI = """\
[run]
seed = 3
workdir = run

[dataset]
classes = ClassA ClassB ClassC
counts = 4 4 4
dims = 24 24 4
split = 0.5 0.25 0.25

[registration]
grid_dims = 4 4 4
max_iters = 10
atlas_rounds = 2
atlas_max_iters = 5

[regressor]
conv_channels = 4
hidden = 8
epochs = 2
batch_size = 4
aug_factor = 2

[dec]
k = 3
latent_dim = 2
ae_hidden = 8
ae_epochs = 10
max_epochs = 5

[evaluate]
pairs = 2
max_iters = 10
"""

COMMANDS = (["synth"], ["atlas"], ["train"], ["predict"], ["evaluate"], ["holdout", "--held-class", "ClassB"])


def write_tiny(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    cfg = directory / "tiny.ini"
    cfg.write_text(TINY_INI)
    return cfg


def run_cli(cfg: Path, *args) -> int:
    return cli.main([*args, "--config", str(cfg)])


def run_all(cfg: Path, commands=COMMANDS):
    for c in commands:
        code = run_cli(cfg, *c)
        if code != 0:
            raise RuntimeError(f"regdec {' '.join(c)} exited with {code}")


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Workdir of a complete run of every command on a small config."""
    cfg = write_tiny(tmp_path_factory.mktemp("tiny"))
    run_all(cfg)
    return cfg, cfg.parent / "run"


@pytest.fixture(scope="session")
def bundled_run(tmp_path_factory):
    """Fresh end-to-end run of the bundled config in a scratch directory, with wall time."""
    import time

    d = tmp_path_factory.mktemp("bundled")
    text = BUNDLED.read_text().replace("workdir = ../runs/bundled", "workdir = run")
    cfg = d / "bundled.ini"
    cfg.write_text(text)
    t0 = time.perf_counter()
    run_all(cfg, COMMANDS[:5])
    elapsed = time.perf_counter() - t0
    return cfg, d / "run", elapsed


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
