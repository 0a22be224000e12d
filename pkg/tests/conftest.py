"""Shared trained models for the acceptance checks.

Training is the expensive part, so each (scheme, configuration, seed) is
trained once per session.  Setting ``SLEEPZOOM_MODEL_CACHE`` to a directory
also keeps the checkpoints on disk between sessions; cached models carry their
recorded training time so runtime budgets still count it.
"""
import os
import time
from pathlib import Path

import pytest

from sleepzoom import harness as H

MODEL_CACHE_ENV = "SLEEPZOOM_MODEL_CACHE"

_REPORT: list = []


class ModelStore:
    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.memory = {}
        self.dccn_seconds = {}

    def dccn(self, config: H.ExperimentConfig):
        """One phase optimizer per geometry/link, shared by every RIS scheme."""
        key = H.training_hash(config.with_(scheme=H.E.Scheme.PSZR))
        if key not in self.dccn_seconds:
            start = time.perf_counter()
            bundle = H.train_dccn_for(config, 1)
            self.dccn_seconds[key] = time.perf_counter() - start
            return bundle
        return H.train_dccn_for(config, 1)

    def get(self, config: H.ExperimentConfig, seed: int) -> H.TrainedModel:
        key = (config.scheme, H.training_hash(config), seed)
        if key in self.memory:
            return self.memory[key]
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{config.scheme.value}-{key[1]}-s{seed}"
            if (path / H.MANIFEST_NAME).is_file():
                self.memory[key] = H.load_model(path, config)
                return self.memory[key]
        dccn = self.dccn(config) if config.scheme.spec.ris else None
        model = H.train(config, seed, dccn=dccn)
        if path is not None:
            H.save_model(model, config, path)
        self.memory[key] = model
        return model


@pytest.fixture(scope="session")
def model_store():
    return ModelStore(os.environ.get(MODEL_CACHE_ENV))


@pytest.fixture(scope="session")
def acceptance_out(tmp_path_factory):
    root = H.output_root()
    out = (root / "acceptance") if root is not None else tmp_path_factory.mktemp("acceptance")
    out.mkdir(parents=True, exist_ok=True)
    return out


@pytest.fixture
def report():
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    def emit(criterion: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _REPORT.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
