import _report


def pytest_terminal_summary(terminalreporter):
    if not _report.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_report.RESULTS, key=lambda c: int(c.split()[0])):
        status, detail = _report.RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid}: {status}  {detail}")
