import numpy as np
import pytest

from medtimeline import synthgen as sg
from medtimeline import sequencer as sq
from medtimeline import vocab as vb


@pytest.fixture(scope="session")
def population():
    cfg = sg.GeneratorConfig(n_patients=400, seed=3)
    records = [r for r in sg.generate_population(cfg) if sg.passes_inclusion(r)]
    vocab = vb.build_vocabulary(sq.corpus_stats(records))
    bins = vb.fit_lab_bins(sq.lab_values(records))
    rng = np.random.default_rng(0)
    seqs = [sq.tokenize_record(r, vocab, bins, rng) for r in records]
    return cfg, records, vocab, bins, seqs


@pytest.fixture(scope="session")
def vocab(population):
    return population[2]


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_results():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
