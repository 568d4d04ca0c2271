import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        passed, title, details = ACCEPTANCE[cid]
        info = ", ".join(f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'} {title} ({info})")
