"""Training tests: init distributions, clipping, Adagrad arithmetic,
loop behavior (early stop, determinism, logging)."""

import numpy as np
import pytest

from oracles import make_example, rand_params

from ptsum import model as md
from ptsum import numerics as nm
from ptsum import training
from ptsum.corpus import EOS_ID, SEP_ID, make_batch
from ptsum.model import ModelConfig
from ptsum.numerics import Tensor
from ptsum.training import Adagrad, TrainConfig, clip_gradients, init_parameters


class TestInitParameters:
    def _params(self, seed=0):
        cfg = ModelConfig(embed_dim=10, hidden_dim=8, mode="ms_pointer", unk_pool_size=4)
        return init_parameters(cfg, vocab_size=10_000, seed=seed)

    def test_embedding_variance_matches_declared(self):
        params = self._params(seed=1)
        draws = params.embedding.data.reshape(-1)
        assert draws.size == 100_000
        var = float(np.var(draws.astype(np.float64)))
        assert 0.9e-8 <= var <= 1.1e-8

    def test_other_tensors_within_uniform_range(self):
        params = self._params(seed=2)
        for name, t in params.named_tensors():
            if name == "embedding":
                continue
            assert np.all(t.data >= -0.02) and np.all(t.data <= 0.02), name

    def test_same_seed_identical(self):
        a, b = self._params(seed=3), self._params(seed=3)
        for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a, b = self._params(seed=3), self._params(seed=4)
        assert not np.array_equal(a.embedding.data, b.embedding.data)

    def test_warm_parameters_deterministic_and_larger(self):
        cfg = ModelConfig(embed_dim=8, hidden_dim=8, mode="ptr_net", unk_pool_size=4)
        a = training.warm_parameters(cfg, 50, seed=5)
        b = training.warm_parameters(cfg, 50, seed=5)
        for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            np.testing.assert_array_equal(ta.data, tb.data)
        assert np.abs(a.embedding.data).std() > 0.01


class TestClipGradients:
    def test_small_norm_unchanged(self):
        grads = [np.array([0.6, 0.8])]  # norm 1.0
        out = clip_gradients(grads, threshold=2.0)
        np.testing.assert_allclose(out[0], [0.6, 0.8])

    def test_three_four_scales_to_twelve_sixteen(self):
        grads = [np.array([3.0]), np.array([4.0])]
        out = clip_gradients(grads, threshold=2.0)
        np.testing.assert_allclose(out[0], [1.2], atol=1e-12)
        np.testing.assert_allclose(out[1], [1.6], atol=1e-12)

    def test_post_clip_norm_property(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            grads = [rng.standard_normal(s) * rng.uniform(0.1, 5) for s in [(3,), (2, 2)]]
            before = nm.l2_norm(grads)
            clip_gradients(grads, threshold=2.0)
            after = nm.l2_norm(grads)
            assert after == pytest.approx(min(before, 2.0), abs=1e-6)

    def test_nonfinite_raises(self):
        with pytest.raises(ValueError, match="non-finite"):
            clip_gradients([np.array([np.nan])], threshold=2.0)
        with pytest.raises(ValueError):
            clip_gradients([np.array([np.inf, 1.0])], threshold=2.0)


class TestAdagrad:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
        opt = Adagrad([p], lr=0.15, accumulator_init=0.1)
        opt.step([np.array([0.0])])
        assert p.data[0] == pytest.approx(1.5)
        assert opt.acc[0][0] == pytest.approx(0.1)

    def test_hand_arithmetic_oracle(self):
        # theta=0, g=3, acc0=0.1: acc=9.1, update = 0.15*3/sqrt(9.1)
        p = Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)
        opt = Adagrad([p], lr=0.15, accumulator_init=0.1)
        opt.step([np.array([3.0])])
        assert opt.acc[0][0] == pytest.approx(9.1, abs=1e-12)
        assert p.data[0] == pytest.approx(-0.14917, abs=1e-5)
        assert p.data[0] == pytest.approx(-0.15 * 3.0 / np.sqrt(9.1), abs=1e-12)

    def test_repeated_steps_shrink(self):
        p = Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)
        opt = Adagrad([p], lr=0.15, accumulator_init=0.1)
        opt.step([np.array([2.0])])
        first = abs(p.data[0])
        before = p.data[0]
        opt.step([np.array([2.0])])
        second = abs(p.data[0] - before)
        assert second < first

    def test_accumulators_never_decrease(self):
        rng = np.random.default_rng(11)
        p = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
        opt = Adagrad([p], lr=0.15, accumulator_init=0.1)
        prev = opt.acc[0].copy()
        for _ in range(20):
            opt.step([rng.standard_normal(5)])
            assert np.all(opt.acc[0] >= prev)
            prev = opt.acc[0].copy()


def _tiny_batch():
    ex = make_example([5, 6, 7, EOS_ID], [8, SEP_ID, 6], [6, 5, EOS_ID])
    return make_batch([ex])


class TestLossDescent:
    def test_single_small_step_strictly_decreases_loss(self):
        cfg = ModelConfig(embed_dim=4, hidden_dim=6, mode="ms_pointer", unk_pool_size=2)
        params = rand_params(cfg, vocab_size=10, seed=13, scale=0.4)
        batch = _tiny_batch()
        before = md.sequence_loss(params, batch, cfg).item()
        nm.zero_grads(params.tensors())
        nm.backward(md.sequence_loss(params, batch, cfg))
        grads = [
            t.grad if t.grad is not None else np.zeros(t.data.shape) for t in params.tensors()
        ]
        opt = Adagrad(params.tensors(), lr=1e-3, accumulator_init=0.1)
        opt.step(grads)
        after = md.sequence_loss(params, batch, cfg).item()
        assert after < before


def _examples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        title = list(rng.integers(4, 12, size=4)) + [EOS_ID]
        target = [int(rng.choice(sorted(set(title[:-1]))))] + [EOS_ID]
        out.append(make_example(title, [rng.integers(4, 12), SEP_ID], target))
    return out


class TestTrainLoop:
    def _config(self, **kw):
        base = dict(batch_size=4, lr=0.15, seed=3, patience=3, max_epochs=5)
        base.update(kw)
        return TrainConfig(**base)

    def _model_config(self):
        return ModelConfig(embed_dim=4, hidden_dim=6, mode="ms_pointer", unk_pool_size=2)

    def test_early_stop_after_patience_without_improvement(self, monkeypatch):
        # freeze the parameters: every validation evaluates identically, so
        # only the first epoch improves
        monkeypatch.setattr(Adagrad, "step", lambda self, grads: None)
        result = training.train(
            _examples(8),
            _examples(4, seed=1),
            self._model_config(),
            self._config(patience=2, max_epochs=10),
            vocab_size=12,
        )
        assert len(result.history) == 3  # improve, miss, miss -> stop
        assert result.best_epoch == 0

    def test_deterministic_loss_curve(self):
        kwargs = dict(
            train_examples=_examples(12),
            valid_examples=_examples(4, seed=1),
            model_config=self._model_config(),
            train_config=self._config(max_epochs=3),
            vocab_size=12,
        )
        a = training.train(**kwargs)
        b = training.train(**kwargs)
        assert [(s.train_loss, s.valid_loss) for s in a.history] == [
            (s.train_loss, s.valid_loss) for s in b.history
        ]

    def test_nonfinite_validation_aborts(self, monkeypatch):
        monkeypatch.setattr(training, "_dataset_nll", lambda *a, **k: float("nan"))
        with pytest.raises(RuntimeError, match="not finite"):
            training.train(
                _examples(8),
                _examples(4, seed=1),
                self._model_config(),
                self._config(max_epochs=2),
                vocab_size=12,
            )

    def test_log_csv_format(self, tmp_path):
        path = tmp_path / "train.log.csv"
        training.train(
            _examples(8),
            _examples(4, seed=1),
            self._model_config(),
            self._config(max_epochs=2, patience=5),
            vocab_size=12,
            log_path=path,
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,seconds"
        assert len(lines) == 3
        fields = lines[1].split(",")
        assert fields[0] == "0"
        float(fields[1]), float(fields[2]), float(fields[3])

    def test_keeps_best_epoch_params(self):
        result = training.train(
            _examples(12),
            _examples(4, seed=1),
            self._model_config(),
            self._config(max_epochs=4, patience=10),
            vocab_size=12,
        )
        assert result.best_epoch >= 0
        assert result.best_valid_loss == min(s.valid_loss for s in result.history)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
