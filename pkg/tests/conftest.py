import time

import pytest

from maskconv.config import RunConfig
from maskconv.corpus import default_corpus_spec, generate_corpus, split_by_latents
from maskconv.train import train

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


class TrainedRun:
    def __init__(self, cfg, model, history, seconds, held, held_gen, markers, out_dir):
        self.cfg = cfg
        self.model = model
        self.history = history
        self.seconds = seconds
        self.held = held
        self.held_gen = held_gen
        self.markers = markers
        self.out_dir = out_dir


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The default configuration trained on the default 5k-pair corpus."""
    cfg = RunConfig()
    spec = default_corpus_spec()
    generated = generate_corpus(spec, cfg.corpus.n, cfg.seed)
    train_set, held = split_by_latents([g.sample for g in generated], cfg.corpus.heldout_percent)
    held_keys = set(held)
    held_gen = [g for g in generated if g.sample in held_keys]
    out_dir = tmp_path_factory.mktemp("trained")
    tick = time.perf_counter()
    model, history = train(cfg, train_set, out_dir)
    seconds = time.perf_counter() - tick
    model.eval()
    return TrainedRun(cfg, model, history, seconds, held, held_gen, set(spec.markers), out_dir)
