import numpy as np
import pytest

from phead.base_lm import BaseLM, BaseLMConfig, PretrainConfig, Vocab, freeze, pretrain_mlm
from phead.data import Dataset, LabeledExample
from phead.toy import make_toy_dataset, toy_corpus

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return record


@pytest.fixture(scope="session")
def toy_dataset() -> Dataset:
    return make_toy_dataset()


@pytest.fixture(scope="session")
def small_base() -> BaseLM:
    """A quickly pretrained, frozen base at d_model=16 for unit tests."""
    cfg = PretrainConfig(d_model=16, n_layers=1, n_heads=2, d_ff_base=32, max_seq_len=32,
                         epochs=3, seed=0)
    return freeze(pretrain_mlm(toy_corpus(300, seed=5), cfg).model)


@pytest.fixture
def random_base():
    """Unfrozen, untrained base over a tiny fixed vocabulary."""
    vocab = Vocab.build(["a b c d e f g h i j k l play music weather book"])
    return BaseLM.init(vocab, BaseLMConfig(d_model=8, n_layers=1, n_heads=2, d_ff_base=16, max_seq_len=8), seed=1)


@pytest.fixture
def tiny_dataset() -> Dataset:
    train = [LabeledExample("play the song", "play_music"), LabeledExample("rain in boston", "get_weather"),
             LabeledExample("play some jazz", "play_music"), LabeledExample("sunny in rome", "get_weather"),
             LabeledExample("rate this novel", "rate_book")]
    test = [LabeledExample("play a tune", "play_music"), LabeledExample("snow in oslo", "get_weather")]
    return Dataset("tiny", ["get_weather", "play_music", "rate_book"], train, test)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
