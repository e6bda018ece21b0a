import pytest

CRITERIA: dict[str, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(tag, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    tag, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    CRITERIA[tag] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(CRITERIA, key=lambda t: int(t[1:])):
        status, title, detail = CRITERIA[tag]
        line = f"{tag} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
