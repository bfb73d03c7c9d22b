import pytest

from equilopo import verify


@pytest.mark.parametrize("scope", ["signal", "conv", "nonlinear", "network"])
def test_verify_scope_passes(scope):
    report = verify.run(scope, seed=0)
    failed = [c for c in report["checks"] if not c["passed"]]
    assert report["passed"], failed
    assert report["scope"] == scope and report["checks"]


def test_verify_unknown_scope():
    with pytest.raises(ValueError):
        verify.run("physics")
