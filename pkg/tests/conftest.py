import numpy as np
import pytest

from matis.structures import FrameAnnotation, ProposalSet


def random_mask(rng, h, w, density=None):
    p = rng.uniform(0.05, 0.95) if density is None else density
    return rng.random((h, w)) < p


def random_proposals(rng, n=10, num_classes=4, h=8, w=8, frame="f"):
    """Random valid proposal set with blobby soft masks."""
    logits = rng.normal(0, 2, size=(n, num_classes + 1))
    probs = np.exp(logits)
    probs /= probs.sum(1, keepdims=True)
    soft = rng.uniform(0, 1, size=(n, h, w))
    return ProposalSet(frame, probs, soft)


def bits_popcount(mask):
    """Independent pixel counter: pack the bits into one Python int."""
    return int.from_bytes(np.packbits(mask.ravel()).tobytes(), "big").bit_count()


def naive_iou(a, b):
    ia = int.from_bytes(np.packbits(a.ravel()).tobytes(), "big")
    ib = int.from_bytes(np.packbits(b.ravel()).tobytes(), "big")
    union = (ia | ib).bit_count()
    if union == 0:
        return None
    return (ia & ib).bit_count() / union


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def annotation(frame, *instances, dims=None):
    return FrameAnnotation(frame, list(instances), dims=dims)


# acceptance summary ----------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    num, title = mark.args
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[num] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the criterion's summary line."""

    def put(text):
        request.node.criterion_detail = text

    return put
