import pytest
import torch

from prophet_lt import BackboneSpec, LongTailSpec, SynthMixtureSpec, build_model, make_synthetic_mixture, per_class_counts

torch.set_num_threads(1)


@pytest.fixture
def tiny_spec():
    return BackboneSpec("mlp", (4,), (5, 6, 7))


def _lt_pair():
    counts = per_class_counts(LongTailSpec(4, 40, 10))
    return make_synthetic_mixture(SynthMixtureSpec(4, 8, counts, 3.0, 1.0, 20), seed=3)


@pytest.fixture
def lt_data():
    return _lt_pair()[0]


@pytest.fixture
def lt_test():
    return _lt_pair()[1]


@pytest.fixture
def small_model():
    return build_model(BackboneSpec("mlp", (8,), (16, 16, 12)), 4, ("after_final_feature",), seed=1)



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
