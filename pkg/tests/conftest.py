import re

_ACCEPTANCE: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        m = re.search(r"test_criterion_(\d+)_(\w+?)(\[.*\])?$", report.nodeid)
        if m:
            key = f"criterion {int(m.group(1)):2d}"
            _ACCEPTANCE.setdefault(key, []).append(f"{m.group(2)}{m.group(3) or ''}")
            _ACCEPTANCE.setdefault(key + "#failed", [])
            if not report.passed:
                _ACCEPTANCE[key + "#failed"].append(m.group(2))


def pytest_terminal_summary(terminalreporter):
    keys = sorted(k for k in _ACCEPTANCE if not k.endswith("#failed"))
    if not keys:
        return
    terminalreporter.section("acceptance criteria")
    for key in keys:
        failed = _ACCEPTANCE[key + "#failed"]
        status = "FAIL" if failed else "PASS"
        parts = _ACCEPTANCE[key]
        detail = ", ".join(sorted(set(p.split("[")[0] for p in parts))) if len(parts) > 1 else parts[0]
        if failed:
            detail += f"; failing: {', '.join(failed)}"
        terminalreporter.write_line(f"[{status}] {key}: {detail}")
