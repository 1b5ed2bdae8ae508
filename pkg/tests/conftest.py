import json
from pathlib import Path

import pytest

from dialsql.schema import schema_from_dict

FIXTURES = Path(__file__).parent / "fixtures"

ACCEPTANCE_CRITERIA = {
    "test_criterion_1_grammar_round_trip":
        "1 grammar round trip (actions and SQL)",
    "test_criterion_2_worked_example_fixture":
        "2 worked-example action sequence",
    "test_criterion_3_gradient_checks":
        "3 gradient checks, layers and all configurations",
    "test_criterion_4_distribution_soundness":
        "4 decode distribution soundness",
    "test_criterion_5_overfit_synthetic_corpus":
        "5 overfit on the synthetic corpus",
    "test_criterion_6_metric_definitions":
        "6 metric definitions",
    "test_criterion_7_set_match_oracle":
        "7 set match versus permutation oracle",
    "test_criterion_8_ood_pipeline":
        "8 out-of-distribution turn pipeline",
    "test_criterion_9_determinism":
        "9 bit-identical reruns",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion that ran."""
    verdicts = {}
    for report in terminalreporter.stats.get("passed", []):
        name = report.nodeid.rsplit("::", 1)[-1]
        if name in ACCEPTANCE_CRITERIA and report.when == "call":
            verdicts.setdefault(name, "PASS")
    for status in ("failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = report.nodeid.rsplit("::", 1)[-1]
            if name in ACCEPTANCE_CRITERIA:
                verdicts[name] = "FAIL"
    if not verdicts:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name in ACCEPTANCE_CRITERIA:
        if name in verdicts:
            terminalreporter.write_line(
                f"  {verdicts[name]}  criterion {ACCEPTANCE_CRITERIA[name]}")


@pytest.fixture(scope="session")
def cars_schema():
    return schema_from_dict(json.loads((FIXTURES / "cars_schema.json").read_text()))


@pytest.fixture(scope="session")
def figure2_actions_text():
    return (FIXTURES / "figure2_actions.txt").read_text()
