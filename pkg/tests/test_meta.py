"""Two-loop episodic training: hand traces, isolation, task sampling."""

from datetime import timedelta

import numpy as np
import pytest

from cargocast import autodiff as ad
from cargocast.autodiff import Tensor
from cargocast.data import ODKey
from cargocast.errors import CargocastError, NonFiniteError
from cargocast.meta import (
    MetaConfig,
    NeuralTaskModel,
    TaskEpisode,
    eligible_task_ods,
    finetune_and_predict,
    finetune_support,
    inner_adapt,
    meta_train,
    meta_train_loop,
    query_gradient,
    sample_tasks,
)
from cargocast.neural import init_params, predict_series, substream
from cargocast.neural.training import eligible_anchors
from cargocast.optim import ParamStore
from tests.conftest import TINY_CFG


class LinearModel:
    """f(x) = w x with squared-error loss; the hand-checkable task model."""

    def loss(self, params, batch):
        x, y = batch
        pred = ad.matmul(Tensor(x), params["w"])
        diff = ad.sub(pred, Tensor(y))
        return ad.tensor_mean(ad.mul(diff, diff))


def linear_init(w=1.0):
    params = ParamStore()
    params.add("w", np.array([[w]]))
    return params


POINT = (np.array([[1.0]]), np.array([[2.0]]))
EPISODE = TaskEpisode(od=ODKey("AAA", "BBB"), support=POINT, query=POINT)


class TestHandTrace:
    def test_inner_step(self):
        # L = (w - 2)^2 at w=1: grad -2, so w' = 1 + 0.1*2 = 1.2
        adapted = inner_adapt(LinearModel(), linear_init(), POINT, inner_lr=0.1, inner_steps=1)
        assert adapted["w"].data[0, 0] == pytest.approx(1.2, abs=1e-12)

    def test_outer_sgd_step(self):
        # query grad at w'=1.2 is 2(1.2-2) = -1.6; w = 1 - 0.1*(-1.6) = 1.16
        cfg = MetaConfig(
            inner_lr=0.1, outer_lr=0.1, inner_steps=1, meta_batch=1, meta_iters=1,
            outer_optimizer="sgd", seed=0,
        )
        out = meta_train_loop(LinearModel(), lambda rng: [EPISODE], linear_init(), cfg)
        assert out["w"].data[0, 0] == pytest.approx(1.16, abs=1e-12)

    def test_fomaml_outer_direction(self):
        # the outer move equals -beta times the query gradient at theta'
        adapted = inner_adapt(LinearModel(), linear_init(), POINT, 0.1, 1)
        grad = query_gradient(LinearModel(), adapted, POINT)
        cfg = MetaConfig(
            inner_lr=0.1, outer_lr=0.1, inner_steps=1, meta_batch=1, meta_iters=1,
            outer_optimizer="sgd", seed=0,
        )
        out = meta_train_loop(LinearModel(), lambda rng: [EPISODE], linear_init(), cfg)
        assert np.allclose(out["w"].data, 1.0 - 0.1 * grad["w"])

    def test_shared_params_never_mutated(self):
        init = linear_init()
        inner_adapt(LinearModel(), init, POINT, 0.1, 3)
        cfg = MetaConfig(inner_lr=0.1, outer_lr=0.1, meta_iters=2, meta_batch=1, outer_optimizer="sgd", seed=0)
        meta_train_loop(LinearModel(), lambda rng: [EPISODE], init, cfg)
        assert init["w"].data.tolist() == [[1.0]]

    def test_zero_iters_identity(self):
        cfg = MetaConfig(meta_iters=0, seed=0)
        out = meta_train_loop(LinearModel(), lambda rng: [EPISODE], linear_init(), cfg)
        assert out["w"].data.tolist() == [[1.0]]

    def test_zero_inner_lr_noop_adapt(self):
        adapted = inner_adapt(LinearModel(), linear_init(), POINT, 0.0, 5)
        assert adapted["w"].data.tolist() == [[1.0]]

    def test_zero_both_rates_full_noop(self):
        cfg = MetaConfig(inner_lr=0.0, outer_lr=0.0, meta_iters=3, meta_batch=1, outer_optimizer="sgd", seed=0)
        out = meta_train_loop(LinearModel(), lambda rng: [EPISODE], linear_init(), cfg)
        assert out["w"].data.tolist() == [[1.0]]

    def test_descent_on_support(self):
        model = LinearModel()
        before = model.loss(linear_init(), POINT).item()
        adapted = inner_adapt(model, linear_init(), POINT, 0.05, 3)
        after = model.loss(adapted, POINT).item()
        assert after <= before


class TestSampleTasks:
    def test_all_ods_when_batch_equals_population(self, small_encoder):
        eligible = eligible_task_ods(small_encoder, "dnn_ladd", TINY_CFG)
        rng = substream(0, "test")
        episodes = sample_tasks(small_encoder, "dnn_ladd", TINY_CFG, eligible.size, rng)
        assert sorted(ep.od for ep in episodes) == [small_encoder.ods[i] for i in eligible]

    def test_seeded_repeatability(self, small_encoder):
        a = sample_tasks(small_encoder, "dnn_ladd", TINY_CFG, 3, substream(7, "x"))
        b = sample_tasks(small_encoder, "dnn_ladd", TINY_CFG, 3, substream(7, "x"))
        assert [ep.od for ep in a] == [ep.od for ep in b]
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.support.labels, eb.support.labels)

    def test_support_query_chronologically_disjoint(self, small_encoder):
        anchors = eligible_anchors("nbeats", small_encoder, TINY_CFG)
        episodes = sample_tasks(small_encoder, "nbeats", TINY_CFG, 2, substream(1, "y"))
        cut = int(0.8 * anchors.size)
        for ep in episodes:
            assert ep.support.labels_h.shape[0] == cut
            assert ep.query.labels_h.shape[0] == anchors.size - cut
            # anchor months/weekdays come from disjoint index ranges
            assert ep.support.size + ep.query.size == anchors.size

    def test_too_few_ods_errors(self, small_encoder):
        with pytest.raises(CargocastError, match="eligible"):
            sample_tasks(small_encoder, "dnn_ladd", TINY_CFG, 99, substream(0, "z"))

    def test_od_subset_restricts_population(self, small_encoder):
        subset = np.array([0, 2])
        episodes = sample_tasks(small_encoder, "dnn_ladd", TINY_CFG, 2, substream(3, "s"), od_subset=subset)
        assert {ep.od for ep in episodes} == {small_encoder.ods[0], small_encoder.ods[2]}


class TestMetaTrainNeural:
    def test_seeded_repeatability(self, small_encoder):
        cfg = MetaConfig(inner_lr=0.05, outer_lr=1e-3, inner_steps=1, meta_batch=2, meta_iters=3, seed=11)
        a = meta_train("dnn_ladd", small_encoder, cfg, TINY_CFG)
        b = meta_train("dnn_ladd", small_encoder, cfg, TINY_CFG)
        assert a.allclose(b, atol=0.0)

    def test_differs_from_init_when_training(self, small_encoder):
        cfg = MetaConfig(inner_lr=0.05, outer_lr=1e-2, inner_steps=1, meta_batch=2, meta_iters=2, seed=11)
        init = init_params("dnn_ladd", small_encoder, TINY_CFG)
        out = meta_train("dnn_ladd", small_encoder, cfg, TINY_CFG)
        assert not out.allclose(init)


class TestFinetune:
    def test_zero_inner_lr_equals_unadapted(self, small_encoder, trained_params):
        cfg = MetaConfig(inner_lr=0.0, finetune_steps=4, seed=0)
        start = small_encoder.fit_end + timedelta(days=1)
        adapted = finetune_and_predict(
            "dnn_ladd", trained_params, small_encoder, 0, start, 10, cfg, TINY_CFG
        )
        plain = predict_series("dnn_ladd", trained_params, small_encoder, 0, start, 10, TINY_CFG)
        assert np.array_equal(adapted, plain)

    def test_support_loss_decreases(self, small_encoder, trained_params):
        model = NeuralTaskModel("dnn_ladd", TINY_CFG)
        cfg = MetaConfig(inner_lr=0.02, finetune_steps=5, seed=0)
        support = finetune_support(small_encoder, "dnn_ladd", TINY_CFG, cfg, 1)
        before = model.loss(trained_params, support).item()
        adapted = inner_adapt(model, trained_params, support, cfg.inner_lr, cfg.finetune_steps)
        after = model.loss(adapted, support).item()
        assert after <= before

    def test_shared_params_isolated_across_ods(self, small_encoder, trained_params):
        cfg = MetaConfig(inner_lr=0.05, finetune_steps=3, seed=0)
        start = small_encoder.fit_end + timedelta(days=1)
        snapshot = trained_params.copy()
        finetune_and_predict("dnn_ladd", trained_params, small_encoder, 0, start, 5, cfg, TINY_CFG)
        finetune_and_predict("dnn_ladd", trained_params, small_encoder, 1, start, 5, cfg, TINY_CFG)
        assert trained_params.allclose(snapshot, atol=0.0)

    def test_window_model_finetune_support_shapes(self, small_encoder):
        cfg = MetaConfig(finetune_days=28, seed=0)
        support = finetune_support(small_encoder, "nbeats", TINY_CFG, cfg, 0)
        assert support.labels_h.shape[1] == TINY_CFG.horizon_chunk
        assert support.size >= 1


@pytest.fixture(scope="module")
def trained_params(small_encoder):
    from cargocast.neural import train_model

    return train_model("dnn_ladd", small_encoder, TINY_CFG).params
