import numpy as np
import pytest

from genrec.cold_start import MaskingConfig
from genrec.decoder import DecoderConfig
from genrec.gradcheck import check_gradients, relative_error
from genrec.model import Recommender, SequenceData, model_config_for
from genrec.mtp import MtpConfig
from genrec.world import DAY, WorldConfig, generate_dataset

LOSSES = {
    "ntp": ("ntp", DecoderConfig(), MaskingConfig()),
    "sampled": ("ntp", DecoderConfig(sampling="uniform", fraction=0.1), MaskingConfig()),
    "mtp": ("mtp", DecoderConfig(), MaskingConfig()),
    "cold_start": ("mtp", DecoderConfig(sampling="uniform", fraction=0.1), MaskingConfig(0.5, "either")),
}


@pytest.fixture(scope="module")
def grad_world():
    cfg = WorldConfig(vocab_size=60, n_users=12, horizon=4 * DAY, cutoff=3 * DAY, billboard_size=4, c_buckets=4,
                      b_cluster_size=6)
    return generate_dataset(cfg, 3)[0]


def max_grad_error(world, loss, head_mode="projected", tower="semantic", d_backbone=8):
    objective, dec, mask = LOSSES[loss]
    cfg = model_config_for(world.catalog, layers=2, d=16, heads=2, seq_len=8, d_backbone=d_backbone,
                           head_mode=head_mode, item_tower=tower, precision="f64")
    m = Recommender.create(cfg, world.catalog, 1)
    noise = np.random.default_rng(5)
    for k, v in m.params.items():  # move gains/biases off their symmetric init
        if k.endswith((".b", "_b", "_b1", "_b2", ".g")):
            m.params[k] = v + 0.1 * noise.standard_normal(v.shape)
    data = SequenceData(world.histories, world.n_users, 8, objective, MtpConfig(window=3))
    batch = data.batch(np.arange(4))

    def run():
        return m.loss_and_grads(batch, dec, np.random.default_rng(9), mask)

    _, grads = run()
    return check_gradients(lambda: run()[0], m.params, grads, n_probe=4)


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


@pytest.mark.parametrize("loss", list(LOSSES))
@pytest.mark.parametrize("head_mode", ["full", "projected"])
def test_loss_gradients(grad_world, loss, head_mode):
    err, per = max_grad_error(grad_world, loss, head_mode)
    assert err < 1e-4, sorted(per.items(), key=lambda kv: -kv[1])[:3]


def test_table_tower_gradients(grad_world):
    err, per = max_grad_error(grad_world, "mtp", "projected", "table", d_backbone=None)
    assert err < 1e-4, per
