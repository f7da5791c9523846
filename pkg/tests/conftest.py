import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from phoneprobe.dataio import AlignmentTable, FeatureArchive, PhoneToken
from phoneprobe.synth import generate, preset

SMALL_PHONES = {"a": "vowel", "i": "vowel", "p": "plosive", "t": "plosive", "s": "fricative", "m": "nasal"}


def make_token(utt, i, phone, start, end, speaker="s1", gender="female", language="EN", phone_class=None):
    return PhoneToken(
        token_id=f"{utt}_{i}",
        utterance_id=utt,
        phone=phone,
        phone_class=phone_class or ("vowel" if phone in "aeiou" else "consonant"),
        start_frame=start,
        end_frame=end,
        speaker=speaker,
        gender=gender,
        language=language,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    """A few hundred tokens over 6 phones, for fast end-to-end checks."""
    return generate(preset("concentrated", n_utterances=40, seed=7, phones=SMALL_PHONES))


@pytest.fixture
def tiny_archive():
    utt = {"u1": np.arange(20, dtype=np.float32).reshape(5, 4), "u2": np.ones((3, 4), dtype=np.float32)}
    return FeatureArchive(utt, 4, 100.0)


@pytest.fixture
def tiny_table(tiny_archive):
    toks = [
        make_token("u1", 0, "a", 0, 2),
        make_token("u1", 1, "b", 2, 5),
        make_token("u2", 0, "a", 0, 3),
    ]
    return AlignmentTable.from_tokens(toks, tiny_archive)


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE[number] = (title, report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, details = _ACCEPTANCE[number]
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(f"{line} ({details})" if details else line)
