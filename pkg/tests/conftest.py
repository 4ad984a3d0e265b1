import pytest
import torch

from gradmask.encoder import DualEncoder, EncoderConfig


def toy_config(**kw):
    base = dict(depth=2, image_depth=2, width=8, heads=2, vocab_size=16, max_text_len=5,
                image_grid=(2, 2), patch_dim=12)
    base.update(kw)
    return EncoderConfig(**base)


def toy_encoder(seed=0, **kw):
    torch.manual_seed(seed)
    return DualEncoder(toy_config(**kw)).double()


def random_batch(cfg, B, seed=0, min_len=3):
    g = torch.Generator().manual_seed(seed)
    N = cfg.max_text_len
    lengths = torch.randint(min_len, N + 1, (B,), generator=g)
    ids = torch.full((B, N), cfg.pad_id, dtype=torch.long)
    for b, n in enumerate(lengths.tolist()):
        ids[b, 0] = cfg.sos_id
        ids[b, 1 : n - 1] = torch.randint(4, cfg.vocab_size, (n - 2,), generator=g)
        ids[b, n - 1] = cfg.eos_id
    rows, cols = cfg.image_grid
    images = torch.randn(B, rows, cols, cfg.patch_dim, generator=g, dtype=torch.float64)
    return ids, lengths, images


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_model():
    return toy_encoder()


def tiny_train_config(**kw):
    """Small model that still fits the synthetic corpus layout."""
    from gradmask.trainer import TrainConfig

    enc = EncoderConfig(depth=2, image_depth=1, width=16, heads=2)
    base = dict(encoder=enc, epochs=2, warmup_epochs=1, batch_size=16, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from gradmask.synth import Corpus, build_corpus

    root = tmp_path_factory.mktemp("small_corpus")
    build_corpus(root, n=48, n_test=16, seed=1)
    return Corpus.load(root)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
