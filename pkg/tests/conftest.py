import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

from drdm.train_eval.config import RunConfig  # noqa: E402
from drdm.train_eval.data import load_fewshot_data  # noqa: E402

# the smoke config doubles as the seconds-scale test configuration
TINY = yaml.safe_load((Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml").read_text())


def tiny_config(**sections) -> RunConfig:
    """A seconds-scale configuration for pipeline tests."""
    return RunConfig().replace(**TINY).replace(**sections)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny-data")
    load_fewshot_data(tiny_config(), d)
    return d


@pytest.fixture
def tiny_data(tiny_data_dir):
    return load_fewshot_data(tiny_config(), tiny_data_dir)
