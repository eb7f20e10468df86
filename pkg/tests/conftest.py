import numpy as np
import pytest

from mpath.model import ModelConfig, init_state
from mpath.reports import CorpusConfig, default_taxonomy, synthesize_corpus
from mpath.tokenizer import build_vocab

# Ground-truth reports and generated reports quoted in the published results
# (LaTeX line breaks and stray closing quotes removed).
FIXTURE_PAIRS = [
    (
        "Breast, core-needle biopsy; Invasive carcinoma of no special type, grade II "
        "(Tubule formation: 3, Nuclear grade: 2, Mitoses: 1)",
        "Breast, core-needle biopsy; Invasive carcinoma of no special type, grade II "
        "(Tubule formation: 3, Nuclear grade: 2, Mitoses: 1)",
    ),
    (
        "Breast, sono-guided core biopsy;  1. Invasive carcinoma of no special type, grade I "
        "(Tubule formation: 2, Nuclear grade: 2, Mitoses: 1)  2. Ductal carcinoma in situ  3. Microcalcification",
        "Breast, sono-guided core biopsy; 1. Invasive carcinoma of no special type, grade II "
        "(Tubule formation: 3, Nuclear grade: 2, Mitoses: 1) 2. Ductal carcinoma in situ 3. Microcalcification",
    ),
    (
        "Urinary bladder, transurethral resection;  Invasive urothelial carcinoma,  with involvement of "
        "subepithelial connective tissue  Note) The specimen includes muscle proper.",
        "Urinary bladder, transurethral resection; Invasive urothelial carcinoma, with involvement of "
        "subepithelial connective tissue 2. Chronic granulomatous inflammation with foreign body reaction "
        "Note) The specimen includes muscle.",
    ),
    (
        "Prostate, biopsy; Acinar adenocarcinoma, Gleason's score 6 (3+3), grade group 1, tumor volume: 10%",
        "Prostate, biopsy; Acinar adenocarcinoma, Gleason's score 7 (3+4), grade group 2 "
        "(Gleason pattern 4: 50%), tumor volume: 5%",
    ),
    (
        "Lung, biopsy;  Adenocarcinoma",
        "Lung, biopsy; Metastatic adenocarcinoma, from colon primary",
    ),
]
GROUND_TRUTH = [gt for gt, _ in FIXTURE_PAIRS]
GENERATED = [gen for _, gen in FIXTURE_PAIRS]
BLADDER = 2


def tiny_config(vocab_size, **kw):
    tax = default_taxonomy()
    base = dict(
        vocab_size=vocab_size,
        d_v=12,
        h=10,
        L_p=2,
        d=8,
        n_enc_layers=1,
        n_dec_layers=1,
        n_heads=2,
        ffn_dim=12,
        max_len=24,
        n_sample_types=len(tax.sample_types),
        n_findings=len(tax.findings),
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return synthesize_corpus(CorpusConfig(n_samples=64, d_v=12, noise_sigma=0.0, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab([s.report_text for s in small_corpus] + ["Pathology report:"])


@pytest.fixture
def tiny_state(small_vocab):
    return init_state(tiny_config(len(small_vocab)), small_vocab, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _acceptance[name] = (report.outcome, report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        outcome, _ = _acceptance[name]
        label = name.removeprefix("test_")
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {label}")
