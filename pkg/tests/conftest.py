import os
import sys
from pathlib import Path

# single-threaded BLAS so reruns are bit-reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, str(Path(__file__).parent))

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        props = dict(report.user_properties)
        outcome = "PASS" if report.passed else "FAIL"
        _acceptance[report.nodeid] = (outcome, props.get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance, key=lambda n: int(n.split("test_criterion_")[1].split("_")[0])):
        outcome, measured = _acceptance[nodeid]
        num, _, label = nodeid.split("test_criterion_")[1].partition("_")
        name = f"criterion {num} ({label.replace('_', ' ')})"
        line = f"{outcome:<5} {name}"
        if measured:
            line += f"  [{measured}]"
        terminalreporter.write_line(line)
