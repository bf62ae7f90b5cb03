"""End-to-end acceptance criteria; each prints one PASS/FAIL line."""

import pytest

from vdsde import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(acceptance.CHECKS))
def test_criterion(number, capsys):
    result = acceptance.run(number)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()
