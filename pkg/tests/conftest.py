import numpy as np
import pytest

from ilora import data
from ilora.model import ILoRAModel, ModelConfig

SMALL = dict(d_emb=4, d_g=8, d_e=8, d_hyper=8, d_hidden=8, d_in=6, d_out=6, rank=2, alpha=4.0)


def small_config(**kw) -> ModelConfig:
    return ModelConfig(**{**SMALL, **kw})


@pytest.fixture
def toy():
    """Six-node synthetic task with a small model."""
    spec = data.SyntheticSpec(k=6, n_blocks=2, n_train=48, n_val=24, n_test=24, seed=3)
    ds = data.gen_synthetic(spec)
    model = ILoRAModel(small_config(), ds.entity_ids, seed=1)

    def batch(split):
        d = ds.split(split)
        return model.make_batch(d.values, d.mask, d.labels)

    return model, batch("train"), batch("val"), ds


def random_b(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    b = model.params["lora.B"]
    b.data = scale * rng.standard_normal(b.shape)


@pytest.fixture
def acceptance_report(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lines.append


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
