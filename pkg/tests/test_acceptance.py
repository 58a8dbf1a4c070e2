"""The ten acceptance criteria at their stated tolerances and runtime budgets.

Each test prints its pass/fail line; the full list is repeated in the
terminal summary so it shows up without ``-s``.
"""

import pytest

from opntk import acceptance

RESULTS = {}


@pytest.mark.slow
@pytest.mark.parametrize("number,name", [(c[0], c[1]) for c in acceptance.CRITERIA],
                         ids=[f"criterion_{c[0]:02d}" for c in acceptance.CRITERIA])
def test_criterion(number, name):
    res = acceptance.run_criterion(number)
    RESULTS[number] = res
    print(res.line())
    assert res.passed, res.line()
