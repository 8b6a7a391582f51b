"""Shared fixtures: the bundled digit subset and one trained pipeline per session."""
from __future__ import annotations

import argparse
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from latexplain import cli
from latexplain import config as config_mod
from latexplain.datasets import load_idx

ROOT = Path(__file__).resolve().parents[1]
IMAGES = ROOT / "data" / "mnist10k-images-idx3-ubyte.gz"
LABELS = ROOT / "data" / "mnist10k-labels-idx1-ubyte.gz"


@pytest.fixture(scope="session")
def digits():
    return load_idx(IMAGES, LABELS)


@dataclass
class Pipeline:
    cfg: config_mod.RunConfig
    ctx: cli._Context
    timings: dict
    metrics: dict
    _explained: list = field(default_factory=list)
    _failed: list = field(default_factory=list)
    _next: int = 0
    explain_seconds: float = 0.0

    @property
    def model(self):
        return self.ctx.model

    @property
    def bb(self):
        return self.ctx.bb

    def explanations(self, count: int):
        """(position, explanation) for the first ``count`` evaluation instances that explain."""
        while len(self._explained) < count:
            pos = self._next
            self._next += 1
            t = time.perf_counter()
            expl, err = self.ctx.try_explain(pos)
            self.explain_seconds += time.perf_counter() - t
            if expl is None:
                self._failed.append((pos, err))
            else:
                self._explained.append((pos, expl))
        return self._explained[:count]

    def failures_before(self, count: int):
        self.explanations(count)
        last = self._explained[count - 1][0]
        return [(p, e) for p, e in self._failed if p < last]


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    out = tmp_path_factory.mktemp("pipeline")
    cfg = config_mod.RunConfig(out=str(out))
    args = argparse.Namespace(images=str(IMAGES), labels=str(LABELS))
    timings, metrics = {}, {}
    for name, fn in (("ingest", cli.cmd_ingest), ("train-bb", cli.cmd_train_bb), ("train-aae", cli.cmd_train_aae)):
        t = time.perf_counter()
        metrics[name] = fn(cfg, args)
        timings[name] = time.perf_counter() - t
    return Pipeline(cfg, cli._Context(cfg), timings, metrics)


def instance_images(pipeline: Pipeline, positions) -> np.ndarray:
    return np.array([pipeline.ctx.image(p) for p in positions])


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion, after the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
