import pytest

from mdpcnn.dataset import load_corpus, synth_generate
from mdpcnn.network import NetworkConfig

TINY = NetworkConfig(
    conv_channels=(2, 3, 4, 4, 4),
    input_size=(32, 32, 1),
    views_per_group=3,
    batch_size=2,
    fc1_width=8,
    embedding_dim=4,
    num_classes=3,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_corpus_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_generate(root, num_classes=3, objects_per_class=3, views_per_object=15, image_size=32, seed=5)
    return root


@pytest.fixture(scope="session")
def small_corpus(small_corpus_root):
    return load_corpus(small_corpus_root)


# acceptance criteria register one line each here; printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
