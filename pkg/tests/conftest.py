from pathlib import Path

import numpy as np
import pytest

from cxrlt.data import AnnotationState, DatasetTable, SampleRecord
from cxrlt.labels import build_registry


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def small_registry():
    return build_registry([("A", ["Edema", "Mass", "Nodule"], [5, 3, 1]), ("B", ["Mass", "Hernia"], [2, 2])])


def make_table(registry, n_patients, images_per_patient, rng, dataset="A"):
    records = []
    for p in range(n_patients):
        for k in range(images_per_patient[p]):
            ann = rng.integers(-1, 2, size=len(registry)).astype(np.int8)
            records.append(SampleRecord(f"img/{p}_{k}.png", f"pat{p}", dataset, ann))
    return DatasetTable(tuple(records), registry.fingerprint, registry.labels)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    from cxrlt.toy import make_corpus

    return make_corpus(tmp_path_factory.mktemp("toy") / "corpus", seed=0)


UNKNOWN = AnnotationState.UNKNOWN
POSITIVE = AnnotationState.POSITIVE
NEGATIVE = AnnotationState.NEGATIVE


# criterion number -> list of (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        ok = all(p for p, _ in results)
        failed = [d for p, d in results if not p]
        detail = results[0][1] if len(results) == 1 else f"{len(results) - len(failed)}/{len(results)} parts pass"
        if failed and len(results) > 1:
            detail += "; failing: " + " | ".join(failed)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
