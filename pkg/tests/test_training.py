"""Joint loss, optimizers, checkpoint format, and the training loop."""

import json

import numpy as np
import pytest

import wstabnet.autodiff as ad
from wstabnet.autodiff import Tensor
from wstabnet.network import build_params
from wstabnet.presets import preset
from wstabnet.synth import generate, write_dataset
from wstabnet.training import (
    Adam,
    BadMagic,
    DatasetEmpty,
    Misaligned,
    Sgd,
    TrainConfig,
    TruncatedFile,
    clip_gradients,
    load_checkpoint,
    loss_total,
    save_checkpoint,
    train,
)

TINY_NET = preset("tiny", "net")


def random_loss_inputs(rng, t=6, v=9, cells=(3, 4)):
    struct_logits = Tensor(rng.normal(size=(t, v)))
    struct_targets = list(rng.integers(1, v, size=t))
    cell_logits = [Tensor(rng.normal(size=(u, v))) for u in cells]
    cell_targets = [list(rng.integers(1, v, size=u)) for u in cells]
    return struct_logits, struct_targets, cell_logits, cell_targets


class TestLossTotal:
    def test_lambda_one_is_structure_loss(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        loss, info = loss_total(s_logits, s_targets, c_logits, c_targets, 1.0)
        assert float(loss.data) == pytest.approx(info["l_struc"], abs=1e-12)

    def test_lambda_zero_is_cell_loss(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        loss, info = loss_total(s_logits, s_targets, c_logits, c_targets, 0.0)
        assert float(loss.data) == pytest.approx(info["l_cell"], abs=1e-12)

    def test_midpoint_arithmetic(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        loss, info = loss_total(s_logits, s_targets, c_logits, c_targets, 0.5)
        expected = 0.5 * info["l_struc"] + 0.5 * info["l_cell"]
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)

    def test_affine_in_lambda(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        values = {
            lam: float(loss_total(s_logits, s_targets, c_logits, c_targets, lam)[0].data)
            for lam in (0.0, 0.5, 1.0)
        }
        assert values[0.5] == pytest.approx((values[0.0] + values[1.0]) / 2, abs=1e-12)

    def test_zero_cell_batch(self, rng):
        s_logits, s_targets, _, _ = random_loss_inputs(rng)
        loss, info = loss_total(s_logits, s_targets, [], [], 0.5)
        assert float(loss.data) == pytest.approx(0.5 * info["l_struc"], abs=1e-12)
        assert info["l_cell"] == 0.0 and not info["degenerate"]

    def test_lambda_zero_and_no_cells_degenerate(self, rng):
        s_logits, s_targets, _, _ = random_loss_inputs(rng)
        loss, info = loss_total(s_logits, s_targets, [], [], 0.0)
        assert float(loss.data) == 0.0
        assert info["degenerate"]

    def test_cell_pooling_weights_by_tokens(self, rng):
        # One 1-token cell at loss x, one 3-token cell at loss y gives the
        # token mean, not the cell mean.
        v = 5
        a = Tensor(np.zeros((1, v)))
        b = Tensor(np.zeros((3, v)))
        loss, info = loss_total(
            Tensor(np.zeros((1, v))), [1], [a, b], [[1], [1, 2, 3]], 0.0
        )
        assert float(loss.data) == pytest.approx(np.log(v), abs=1e-12)

    def test_misaligned(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        with pytest.raises(Misaligned):
            loss_total(s_logits, s_targets[:-1], c_logits, c_targets, 0.5)
        with pytest.raises(Misaligned):
            loss_total(s_logits, s_targets, c_logits, c_targets[:-1], 0.5)

    def test_gradient_through_loss(self, rng):
        s_logits, s_targets, c_logits, c_targets = random_loss_inputs(rng)
        for t in (s_logits, *c_logits):
            t.requires_grad = True

        def f():
            loss, _ = loss_total(s_logits, s_targets, c_logits, c_targets, 0.3)
            return loss

        report = ad.grad_check(f, {"s": s_logits, "c0": c_logits[0]}, h=1e-5, tol=1e-6)
        assert report["pass"], report


class TestTrainConfig:
    def test_schedule_lookup(self):
        config = TrainConfig(lr_schedule=((2, 1e-3), (1, 1e-4)))
        assert [config.lr_for_epoch(e) for e in (1, 2, 3)] == [1e-3, 1e-3, 1e-4]
        assert config.n_epochs == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=1.5)
        with pytest.raises(ValueError):
            TrainConfig(lr_schedule=((0, 1e-3),))
        with pytest.raises(ValueError):
            TrainConfig(optimizer="adagrad")


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p._grad = np.array([0.5, -0.5])
        Sgd({"p": p}).step(0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_adam_lr_zero_bit_identical(self, rng):
        p = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        before = p.data.tobytes()
        p._grad = rng.normal(size=(4, 4))
        Adam({"p": p}).step(0.0)
        assert p.data.tobytes() == before

    def test_adam_reduces_simple_quadratic(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam({"p": p})
        for _ in range(200):
            p.zero_grad()
            loss = ad.mul(p, p)
            ad.backward(loss)
            opt.step(0.1)
        assert abs(p.data.item()) < 0.5

    def test_clip_gradients(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p._grad = np.full(4, 10.0)
        norm = clip_gradients({"p": p}, 1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p._grad) == pytest.approx(1.0)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = build_params(TINY_NET, seed=2)
        train_cfg = preset("tiny", "train")
        p1 = tmp_path / "a.wstb"
        p2 = tmp_path / "b.wstb"
        save_checkpoint(params, TINY_NET, train_cfg, p1)
        loaded, net2, train2 = load_checkpoint(p1)
        save_checkpoint(loaded, net2, train2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tensors_bit_exact_at_f32(self, tmp_path):
        params = build_params(TINY_NET, seed=3)
        path = tmp_path / "c.wstb"
        save_checkpoint(params, TINY_NET, preset("tiny", "train"), path)
        loaded, _, _ = load_checkpoint(path)
        for name, p in params.items():
            expected = p.data.astype(np.float32)
            assert loaded[name].data.tobytes() == expected.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.wstb"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        params = build_params(TINY_NET, seed=4)
        path = tmp_path / "t.wstb"
        save_checkpoint(params, TINY_NET, preset("tiny", "train"), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(TruncatedFile):
            load_checkpoint(path)

    def test_header_layout(self, tmp_path):
        params = build_params(TINY_NET, seed=5)
        path = tmp_path / "h.wstb"
        save_checkpoint(params, TINY_NET, preset("tiny", "train"), path)
        blob = path.read_bytes()
        assert blob[:4] == b"WSTB" and blob[4] == 1


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    config = preset("tiny", "gen")
    samples = generate(config, 8)
    write_dataset(samples, out, ["train"] * 8)
    return out


class TestTrainLoop:
    def test_two_runs_byte_identical(self, tiny_dataset, tmp_path):
        train_cfg = preset("tiny", "train")
        ckpts = []
        for name in ("r1", "r2"):
            final = train(tiny_dataset, TINY_NET, train_cfg, tmp_path / name)
            ckpts.append(final.read_bytes())
        assert ckpts[0] == ckpts[1]

    def test_metrics_log_schema_and_lr(self, tiny_dataset, tmp_path):
        from dataclasses import replace

        train_cfg = replace(preset("tiny", "train"), lr_schedule=((2, 1e-3), (1, 1e-4)))
        train(tiny_dataset, TINY_NET, train_cfg, tmp_path / "m")
        lines = [
            json.loads(line)
            for line in (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
        ]
        step_rows = [r for r in lines if "l_struc" in r]
        assert {"epoch", "step", "loss", "l_struc", "l_cell", "lr"} <= set(step_rows[0])
        by_epoch = {}
        for row in step_rows:
            by_epoch.setdefault(row["epoch"], set()).add(row["lr"])
        assert by_epoch[1] == {1e-3} and by_epoch[2] == {1e-3} and by_epoch[3] == {1e-4}
        for epoch in (1, 2, 3):
            assert (tmp_path / "m" / f"ep{epoch}.wstb").exists()

    def test_bbox_field_changes_nothing(self, tiny_dataset, tmp_path):
        ann = tiny_dataset / "annotations.jsonl"
        original = ann.read_text()
        boxed_dir = tmp_path / "boxed"
        boxed_dir.mkdir()
        (boxed_dir / "images").symlink_to(tiny_dataset / "images")
        rows = [json.loads(line) for line in original.splitlines()]
        for row in rows:
            row["bbox"] = [[1, 2, 3, 4]]
        (boxed_dir / "annotations.jsonl").write_text(
            "\n".join(json.dumps(r) for r in rows) + "\n"
        )
        train_cfg = preset("tiny", "train")
        plain = train(tiny_dataset, TINY_NET, train_cfg, tmp_path / "plain")
        boxed = train(boxed_dir, TINY_NET, train_cfg, tmp_path / "with_boxes")
        assert plain.read_bytes() == boxed.read_bytes()

    def test_empty_dataset(self, tiny_dataset, tmp_path):
        with pytest.raises(DatasetEmpty):
            train(tiny_dataset, TINY_NET, preset("tiny", "train"), tmp_path / "e", split="nope")
