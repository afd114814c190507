import numpy as np
import pytest

from cptlab.models import ModelSpec
from cptlab.streams import StreamConfig
from cptlab.training import Budget
from cptlab.scenario import RunConfig


def tiny_text_stream(seed=0, n_experiences=2, **kw):
    base = dict(
        seed=seed,
        modality="text",
        n_experiences=n_experiences,
        n_base=200,
        n_pretrain=80,
        n_downstream_train=40,
        n_downstream_val=20,
        n_downstream_test=20,
        n_fc_train=40,
        n_fc_val=20,
        n_fc_test=32,
    )
    base.update(kw)
    return StreamConfig(**base)


def tiny_image_stream(seed=0, n_experiences=2, **kw):
    base = dict(
        seed=seed,
        modality="image",
        image_size=8,
        n_experiences=n_experiences,
        n_base=120,
        n_pretrain=60,
        n_downstream_train=40,
        n_downstream_val=20,
        n_downstream_test=20,
        n_fc_train=40,
        n_fc_val=20,
        n_fc_test=32,
    )
    base.update(kw)
    return StreamConfig(**base)


def tiny_run_config(objective="mlm", seed=0, n_experiences=2, modality=None, **kw):
    modality = modality or ("image" if objective == "mim" else "text")
    stream = (tiny_text_stream if modality == "text" else tiny_image_stream)(seed, n_experiences)
    model = ModelSpec(family=kw.pop("family", "transformer"), depth=2, width=16, heads=2, max_sequence=16, patch=4)
    base = dict(
        objective=objective,
        stream=stream,
        model=model,
        seed=seed,
        initial=Budget(2, 1e-3, patience=2),
        pretrain=Budget(2, 1e-3, patience=2),
        finetune=Budget(2, 1e-3, batch_size=16),
        probe=Budget(2, 1e-2),
        vocab_size=96,
        codebook_size=8,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
