import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VARIANTS = ("none", "after_encoder", "differentiable")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: needs the shared toy training runs")


@dataclass
class ToyRun:
    variant: str
    out_dir: Path
    state: object
    model: object
    best: object
    seconds: float
    train_metrics: dict
    test_report: object


def train_toy(corpus, variant, out_dir):
    from selectod import evaluator as E
    from selectod import trainer as Tr
    from selectod.model import ModelConfig, TODModel

    raw = json.loads((CONFIGS / f"train_{variant}.json").read_text())
    mcfg = ModelConfig(vocab_size=len(corpus.vocab), n_span_tags=len(corpus.tag_names), **raw["model"])
    tcfg = Tr.TrainConfig.from_dict(raw["train"])
    t0 = time.perf_counter()
    state, model = Tr.train(corpus, mcfg, tcfg, out_dir=str(out_dir))
    seconds = time.perf_counter() - t0
    best = TODModel.load(state.best_checkpoint)
    metrics = Tr.dataset_losses(model, corpus, variant, "train")
    report = E.evaluate(best, corpus, "test", max_len=tcfg.max_decode_len)
    return ToyRun(variant, Path(out_dir), state, model, best, seconds, metrics, report)


@pytest.fixture(scope="session")
def toy_corpus():
    from selectod import corpus as C

    return C.generate_corpus(json.loads((CONFIGS / "corpus_toy.json").read_text()))


@pytest.fixture(scope="session")
def toy_runs(toy_corpus, tmp_path_factory):
    """One full toy training run per variant, shared across the session."""
    root = tmp_path_factory.mktemp("toy")
    return {v: train_toy(toy_corpus, v, root / v) for v in VARIANTS}


# -- acceptance summary -------------------------------------------------------------------

_criteria: dict = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n, doc in _criterion_of.get(report.nodeid, []):
        passed, total, _ = _criteria.get(n, (0, 0, doc))
        _criteria[n] = (passed + int(report.passed), total + 1, doc)


_criterion_of: dict = {}
_notes: list = []


@pytest.fixture(scope="session")
def acceptance_notes():
    """Lines appended here are shown in the acceptance section of the terminal summary."""
    return _notes


def pytest_collection_modifyitems(items):
    for item in items:
        if "toy_runs" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
        for m in item.iter_markers("criterion"):
            _criterion_of.setdefault(item.nodeid, []).append((m.args[0], m.args[1] if len(m.args) > 1 else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        passed, total, doc = _criteria[n]
        status = "PASS" if passed == total else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status} ({passed}/{total} checks)  {doc}")
    for line in _notes:
        terminalreporter.write_line(line)
