import numpy as np
import pytest

from rin.model import RIN, ModelConfig

ACCEPTANCE_RESULTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_shape=(8, 8, 3), patch_size=2, num_blocks=2, layers_per_block=1,
                       num_latents=4, latent_dim=16, interface_dim=16, heads=2, num_classes=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return RIN(tiny_cfg, seed=0, dtype=np.float64)


def tiny_config_text(out_dir, **overrides):
    lines = {
        "model.input_shape": "8,8,3", "model.patch_size": "2", "model.num_blocks": "2",
        "model.layers_per_block": "1", "model.num_latents": "4", "model.latent_dim": "16",
        "model.interface_dim": "16", "model.heads": "2", "train.batch_size": "4",
        "train.total_updates": "12", "optim.lr": "0.01", "optim.warmup": "3",
        "data.kind": "gradient-images", "run.out_dir": str(out_dir),
        "run.checkpoint_every": "4", "run.log_every": "0",
    }
    lines.update(overrides)
    return "\n".join(f"{k}={v}" for k, v in lines.items()) + "\n"


@pytest.fixture
def config_text(tmp_path):
    return lambda **kw: tiny_config_text(tmp_path / "run", **kw)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    label = getattr(item.function, "criterion", None)
    if label is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    ACCEPTANCE_RESULTS.append((label, status))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{status}  {label}")
