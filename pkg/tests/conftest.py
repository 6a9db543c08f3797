import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


TINY = {
    "model.width": 16, "model.enc_depth": 1, "model.dec_depth": 1, "model.n_heads": 2,
    "model.time_embed_dim": 16, "batch_size": 8, "epochs": 3, "warmup_epochs": 0.5,
    "finetune.batch_size": 8, "finetune.epochs": 2, "finetune.warmup_epochs": 0.5,
    "sampler.n_steps": 3,
}


def tiny_config(**overrides):
    """A seconds-scale run on a small slice of the digits corpus."""
    from umd.config import RunConfig

    return RunConfig.desk().replace(**{**TINY, **overrides})


@pytest.fixture(scope="session")
def digits():
    from umd.data import load_digits16

    return load_digits16()


@pytest.fixture(scope="session")
def small_digits(digits):
    return digits.subset(torch.arange(40))


# Acceptance criteria report: tests marked ``criterion(n)`` are grouped by
# number and summarised as one PASS/FAIL line each at the end of the run.
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "details": []})
        entry["ok"] &= report.outcome == "passed"
        details = [v for k, v in item.user_properties if k == "detail"]
        if report.outcome != "passed" and not details:
            details = [f"{item.name}: {report.outcome}"]
        entry["details"].extend(details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {'; '.join(entry['details'])}")
