import numpy as np
import pytest
import torch

from hedfsod.decoder import DecoderConfig
from hedfsod.detector import ModelConfig, build_detector

# single-threaded CPU keeps every run bit-reproducible
torch.set_num_threads(1)


def tiny_config(**decoder_kw) -> ModelConfig:
    dec = dict(num_layers=3, num_stacked=1, num_queries=5, d_model=16, n_heads=2, ffn_dim=32)
    dec.update(decoder_kw)
    return ModelConfig(image_size=16, patch_size=8, encoder_layers=1, num_categories=3, decoder=DecoderConfig(**dec))


@pytest.fixture
def tiny_model():
    return build_detector(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (ok, detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
