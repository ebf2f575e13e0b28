import warnings

from hypothesis import HealthCheck, settings

settings.register_profile(
    "adm",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("adm")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or fitting checks")
    config.addinivalue_line("markers", "acceptance: acceptance criteria (includes the long model fits)")
    warnings.filterwarnings("ignore", message=".*spectral radius.*")


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.LINES:
            terminalreporter.write_line(line)
