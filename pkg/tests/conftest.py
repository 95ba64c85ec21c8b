import pytest

from mtlforge.data import SplitSpec, split, subsample, synth_generate
from mtlforge.encoder import EncoderConfig
from mtlforge.tokenizer import build_vocab
from mtlforge.trainer import TaskSplits

# Small enough that a full training run takes about a second.
SMALL_ENCODER = EncoderConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_len=10, vocab_size=600)


@pytest.fixture(scope="session")
def small_encoder():
    return SMALL_ENCODER


@pytest.fixture(scope="session")
def synth_tasks():
    """(primary, auxiliary, vocab) on a 300-example synthetic pair, primary train cut to 80."""
    primary, auxiliary = synth_generate(300, vocab_words=120, seed=1, correlation=0.9)
    spec = SplitSpec(seed=69556)
    p_train, p_val, p_test = split(primary, spec)
    a = split(auxiliary, spec)
    p_train = subsample(p_train, 80, 69556)
    vocab = build_vocab(p_train.texts + a[0].texts, 600, 2)
    return TaskSplits(p_train, p_val, p_test), TaskSplits(*a), vocab


# --- acceptance summary -------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or report.when != "call" and report.outcome != "failed":
        return
    name = report.nodeid.split("::")[-1]
    detail = ""
    for title, content in report.sections:
        if "stdout" in title:
            detail = content.strip().splitlines()[-1] if content.strip() else ""
    if report.when == "call" or name not in _ACCEPTANCE:
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  {name}  {detail}")
