import pytest

from gridlm.codec import build_text_vocab
from gridlm.model import ModelConfig
from gridlm.vocab import VocabLayout


@pytest.fixture(scope="session")
def layout():
    return VocabLayout()


@pytest.fixture(scope="session")
def vocab(layout):
    return build_text_vocab(layout)


@pytest.fixture(scope="session")
def config(layout):
    return ModelConfig(layout=layout)


@pytest.fixture(scope="session")
def tiny_config(layout):
    # Small dims for fast forward/backward; same layout and grid as default.
    return ModelConfig(
        d_model=32,
        n_layers_backbone=2,
        n_layers_adapter=1,
        n_heads=2,
        max_seq_len=160,
        grid_k=8,
        layout=layout,
    )
