"""Collects the acceptance criteria outcomes and prints one line per criterion."""

_OUTCOMES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed or report.skipped:
        number, title = props["criterion"]
        measured = "; ".join(v for k, v in report.user_properties if k == "measured")
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _OUTCOMES[number] = (status, title, measured)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, title, measured = _OUTCOMES[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  [{measured}]")
