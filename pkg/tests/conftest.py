import numpy as np
import pytest

from omlog import neural as nn
from omlog.corpus import LogHeader, Sample, split_train_test
from omlog.meta import EpisodeConfig
from omlog.pipeline import ModelConfig, Mode, NormalityConfig, StreamConfig, fit_detector
from omlog.synth import drifted_spec, synthesize


def desk_stream_config(mode=Mode.OMLOG, seed=0, **episode):
    ep = dict(tasks_per_batch=10, support_size=10, inner_epochs=5, inner_lr=0.5, batch_size=64)
    ep.update(episode)
    return StreamConfig(
        batch_size=100, mode=mode, seed=seed,
        model=ModelConfig(h=5, embed_dim=8, hidden_size=32, top_k=2),
        train=nn.SgdConfig(learning_rate=1.0, epochs=20, eval_every=5, batch_size=64),
        normality=NormalityConfig(sgd=nn.SgdConfig(learning_rate=0.5, epochs=30, eval_every=10, batch_size=32)),
        episode=EpisodeConfig(**ep),
    )


def tiny_stream_config(mode=Mode.OMLOG, seed=0, **episode):
    """Small enough to train in about a second."""
    cfg = desk_stream_config(mode, seed, **episode)
    cfg.model = ModelConfig(h=3, embed_dim=4, hidden_size=8, top_k=2)
    cfg.train = nn.SgdConfig(learning_rate=1.0, epochs=4, eval_every=2, batch_size=64)
    cfg.normality.sgd = nn.SgdConfig(learning_rate=0.5, epochs=4, eval_every=2, batch_size=32)
    cfg.batch_size = 50
    return cfg


def make_sample(events, index=0, label=0, dt=1.0, component="c", level="INFO"):
    headers = [LogHeader(index * 1000.0 + i * dt, component, level) for i in range(len(events))]
    return Sample(list(events), headers, label, ("test", index, index))


@pytest.fixture
def sample_factory():
    return make_sample


@pytest.fixture(scope="session")
def tiny_stream():
    """A short drifted stream and a quickly trained detector shared by pipeline tests."""
    st = synthesize(drifted_spec(seed=3, sample_length=20, durations=(200, 100, 100), batch_size=50))
    train, test = split_train_test(st.samples, 0.5)
    cfg = tiny_stream_config()
    return train, test, fit_detector(train, cfg), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
