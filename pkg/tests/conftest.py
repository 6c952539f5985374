import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SEVLAB_FULL_SEARCH") == "1":
        return
    skip = pytest.mark.skip(reason="set SEVLAB_FULL_SEARCH=1 to run the 2^32 search")
    for item in items:
        if "fullsearch" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def small_guest():
    """Factory: a 20-bit machine with gpa frames 0..3 mapped and ``code`` at gpa 0."""
    from sevlab.machine import Flags, Machine
    from sevlab.mini_vm import VMState
    from sevlab.tweak_cipher import CipherMode, PaperDefault, make_tweak_table

    def make(code: bytes = b"", mode=CipherMode.XEX, flags: Flags | None = None):
        mach = Machine(make_tweak_table(PaperDefault(n=20)), mode, b"\x11" * 16, b"\x22" * 16, flags)
        for g, h in enumerate((9, 14, 3, 27)):
            mach.map_guest_page(g, h)
        if code:
            mach.launch_write(0, code)
        vm = VMState(ip=0)
        vm.regs[7] = 0x3800
        return mach, vm
    return make


_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _criteria[num] = (title, "PASS" if call.excinfo is None else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, verdict = _criteria[num]
        terminalreporter.write_line(f"criterion {num}: {verdict}  {title}")
