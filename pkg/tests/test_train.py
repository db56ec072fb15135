"""Loss terms, optimizer, and training-loop behavior."""

import json
import types
from pathlib import Path

import numpy as np
import pytest

import biasseg.autodiff as ad
import biasseg.model as M
from biasseg.autodiff import Tensor
from biasseg.data import BiasProfile, generate_dataset, load_dataset
from biasseg.errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    VocabularyError,
)
from biasseg.gradcheck import fd_model_params, rel_error
from biasseg.hitl import binarize, error_region, refine_pass, sample_corrective_points
from biasseg.train import (
    LR_PRESETS,
    AdamW,
    TrainConfig,
    _vlm_term,
    _zero_scalar,
    loss_aur,
    loss_hitl,
    loss_vlm,
    total_loss,
    train,
)
from biasseg.uncertainty import UncertaintyHyper, soft_dice_loss, uncertainty_record


def scalar(x, grad=False):
    return Tensor(np.float64(x), requires_grad=grad)


class TestLossAur:
    def test_masked_weighted_sum_oracle(self):
        ls = [scalar(0.5), scalar(0.25), scalar(0.9)]
        out = loss_aur(ls, [1.2, 2.0, 5.0], [1, 1, 0])
        assert out.item() == pytest.approx(1.1, abs=1e-12)

    def test_all_invalid_gives_zero(self):
        assert loss_aur([None, None], [3.0, 4.0], [0, 0]).item() == 0.0

    def test_perfect_batch_near_zero_regardless_of_weights(self):
        ls = [scalar(1e-9), scalar(2e-9)]
        assert loss_aur(ls, [7.0, 7.3], [1, 1]).item() < 1e-7

    def test_weighting_off_ignores_weights(self):
        ls = [scalar(0.5), scalar(0.25)]
        off = loss_aur(ls, [9.0, 9.0], [1, 1], weighting=False)
        assert off.item() == pytest.approx(0.75, abs=1e-12)

    def test_gradient_carries_the_weight(self):
        ls = [scalar(0.5, grad=True), scalar(0.25, grad=True)]
        out = loss_aur(ls, [1.5, 4.0], [1, 1])
        ad.backward(out)
        assert ls[0].grad == pytest.approx(1.5)
        assert ls[1].grad == pytest.approx(4.0)

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(ContractError):
            loss_aur([scalar(0.1)], [1.0, 2.0], [1])

    def test_valid_sample_without_loss_rejected(self):
        with pytest.raises(ContractError):
            loss_aur([None], [1.0], [1])


class TestLossHitl:
    def test_empty_set_is_zero(self):
        assert loss_hitl([], []).item() == 0.0

    def test_singleton(self):
        assert loss_hitl([scalar(0.3)], [1]).item() == pytest.approx(0.3)

    def test_masked_sum_oracle(self):
        out = loss_hitl([scalar(0.2), scalar(0.5)], [1, 0])
        assert out.item() == pytest.approx(0.2, abs=1e-12)


class TestLossVlm:
    def test_uniform_logits_closed_form(self):
        lg = Tensor(np.zeros((3, 4)), requires_grad=True)
        out = loss_vlm(lg, np.array([0, 1, 2]))
        assert out.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_confident_correct_prediction_near_zero(self):
        data = np.full((2, 5), -40.0)
        data[0, 1] = 40.0
        data[1, 3] = 40.0
        out = loss_vlm(Tensor(data, requires_grad=True), np.array([1, 3]))
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_all_padded_is_zero_by_convention(self):
        lg = Tensor(np.zeros((2, 4)), requires_grad=True)
        out = loss_vlm(lg, np.array([0, 1]), np.array([False, False]))
        assert out.item() == 0.0

    def test_pad_mask_drops_rows_from_the_mean(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(4, 6))
        targets = np.array([0, 1, 2, 3])
        keep = np.array([True, False, True, False])
        out = loss_vlm(Tensor(data, requires_grad=True), targets, keep)
        # hand NLL over the two kept rows
        want = 0.0
        for r in (0, 2):
            p = np.exp(data[r] - data[r].max())
            p /= p.sum()
            want -= np.log(p[targets[r]])
        assert out.item() == pytest.approx(want / 2, abs=1e-12)

    def test_out_of_range_target_rejected(self):
        lg = Tensor(np.zeros((2, 4)))
        with pytest.raises(VocabularyError):
            loss_vlm(lg, np.array([0, 4]))
        with pytest.raises(VocabularyError):
            loss_vlm(lg, np.array([-1, 0]))

    def test_misaligned_targets_rejected(self):
        with pytest.raises(ContractError):
            loss_vlm(Tensor(np.zeros((2, 4))), np.array([0, 1, 2]))

    def test_gradient_matches_finite_differences(self):
        from biasseg.gradcheck import check_op

        rng = np.random.default_rng(7)
        lg = rng.normal(size=(5, 6))
        targets = np.array([0, 5, 2, 3, 1])
        err = check_op(lambda ts: loss_vlm(ts[0], targets), [lg])
        assert err < 1e-4

    def test_extreme_logits_stay_finite(self):
        data = np.array([[1e4, -1e4, 0.0], [-1e4, 1e4, 5.0]])
        out = loss_vlm(Tensor(data, requires_grad=True), np.array([1, 0]))
        assert np.isfinite(out.item())


class TestTotalLoss:
    def test_zero_composition(self):
        assert total_loss(scalar(0), scalar(0), scalar(0)).item() == 0.0

    def test_direct_sum_oracle(self):
        out = total_loss(scalar(1.1), scalar(0.3), scalar(1.4))
        assert out.item() == pytest.approx(2.8, abs=1e-12)

    def test_term_weights_apply(self):
        out = total_loss(scalar(1.0), scalar(1.0), scalar(1.0), weights=(2.0, 0.0, 0.5))
        assert out.item() == pytest.approx(2.5, abs=1e-12)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4
        assert cfg.lr == pytest.approx(1e-3)
        assert cfg.r == pytest.approx(0.3)
        assert cfg.loss_weights == (1.0, 1.0, 1.0)
        assert cfg.n_corrective == 1
        assert cfg.uncertainty_weighting and cfg.hitl and cfg.vlm_loss

    def test_reference_rate_presets_recorded(self):
        assert LR_PRESETS["toy"] == pytest.approx(1e-3)
        assert LR_PRESETS["full_stage1"] == pytest.approx(1e-5)
        assert LR_PRESETS["full_stage2"] == pytest.approx(5e-6)

    @pytest.mark.parametrize(
        "kw",
        [
            {"batch_size": 0},
            {"epochs": 0},
            {"lr": 0.0},
            {"lr": float("nan")},
            {"r": 0.0},
            {"r": 1.5},
            {"n_corrective": 0},
            {"loss_weights": (1.0, 1.0)},
            {"loss_weights": (1.0, -1.0, 1.0)},
            {"text_only_ratio": 1.0},
            {"weight_decay": -0.1},
        ],
    )
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, seed=9, r=0.5, loss_weights=(1.0, 0.5, 2.0))
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"no_such_knob": 1})


class TestAdamW:
    def _holder(self, value):
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        return types.SimpleNamespace(tensors={"p": t}), t

    def test_single_step_oracle(self):
        params, t = self._holder([2.0])
        t.grad = np.array([0.5])
        opt = AdamW(params, lr=0.1, weight_decay=0.01)
        opt.step()
        # bias-corrected first step: mhat = g, vhat = g^2
        want = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0)
        assert t.data[0] == pytest.approx(want, rel=1e-12)

    def test_none_grad_is_skipped(self):
        params, t = self._holder([3.0])
        opt = AdamW(params, lr=0.1, weight_decay=0.5)
        opt.step()
        assert t.data[0] == 3.0  # decoupled decay only applies alongside a gradient

    def test_converges_on_quadratic(self):
        params, t = self._holder([5.0])
        opt = AdamW(params, lr=0.2, weight_decay=0.0)
        for _ in range(200):
            t.grad = 2.0 * (t.data - 1.5)
            opt.step()
        assert abs(t.data[0] - 1.5) < 1e-3


# -- loop-level behavior --------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinytrain")
    profile = BiasProfile(
        concept_quotas={"circle": 6, "square": 4, "triangle": 2},
        modality_weights={"plain": 0.55, "noise": 0.25, "lowcontrast": 0.15, "textured": 0.05},
        attribute_weights={"dark": 0.2, "mid": 0.6, "bright": 0.2},
        image_size=(16, 16),
    )
    generate_dataset(profile, seed=5, out_dir=root, n_test_per_concept=2)
    return (
        load_dataset(root / "train" / "manifest.json"),
        load_dataset(root / "test" / "manifest.json"),
    )


def small_config(**kw):
    base = dict(
        epochs=1,
        seed=3,
        arch=M.Hyper(C=8, d=8, heads=2, V=len(M.VOCAB), L_max=16),
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_deterministic_trajectories(self, tiny_split):
        tr, _ = tiny_split
        cfg = small_config(epochs=2)
        _, log_a = train(cfg, tr)
        _, log_b = train(cfg, tr)
        assert log_a.steps == log_b.steps

        def stable(epochs):  # wall time is the only permitted difference
            return [{k: v for k, v in e.items() if k != "seconds"} for e in epochs]

        assert stable(log_a.epochs) == stable(log_b.epochs)

    def test_loss_is_weighted_sum_of_components(self, tiny_split):
        tr, _ = tiny_split
        cfg = small_config(loss_weights=(1.0, 2.0, 0.5))
        _, log = train(cfg, tr)
        for s in log.steps:
            want = s["loss_aur"] + 2.0 * s["loss_hitl"] + 0.5 * s["loss_vlm"]
            assert s["loss"] == pytest.approx(want, rel=1e-6)

    def test_hitl_off_means_no_refine_passes(self, tiny_split):
        tr, _ = tiny_split
        _, log = train(small_config(hitl=False), tr)
        assert log.refine_passes == 0
        assert all(s["loss_hitl"] == 0.0 for s in log.steps)
        assert all(s["hard_indices"] == [] for s in log.steps)

    def test_hitl_on_refines_hard_fraction(self, tiny_split):
        tr, _ = tiny_split
        cfg = small_config()
        _, log = train(cfg, tr)
        # batch of 4 at r=0.3 -> exactly one refinement per step
        assert log.refine_passes == len(log.steps)
        assert all(len(s["hard_indices"]) == 1 for s in log.steps)

    def test_vlm_off_zeroes_the_term(self, tiny_split):
        tr, _ = tiny_split
        _, log = train(small_config(vlm_loss=False), tr)
        assert all(s["loss_vlm"] == 0.0 for s in log.steps)

    def test_weighting_off_first_step_not_larger(self, tiny_split):
        # same params/prompts at step 1; w >= 1 so the weighted term dominates
        tr, _ = tiny_split
        _, log_on = train(small_config(), tr)
        _, log_off = train(small_config(uncertainty_weighting=False), tr)
        assert log_off.steps[0]["loss_aur"] <= log_on.steps[0]["loss_aur"]
        assert log_off.steps[0]["mean_w"] == log_on.steps[0]["mean_w"]

    def test_step_counter_monotone(self, tiny_split):
        tr, _ = tiny_split
        _, log = train(small_config(epochs=2), tr)
        assert [s["step"] for s in log.steps] == list(range(1, len(log.steps) + 1))

    def test_artifacts_on_disk(self, tiny_split, tmp_path):
        tr, te = tiny_split
        cfg = small_config(epochs=2)
        _, log = train(cfg, tr, eval_ds=te, out_dir=tmp_path)
        lines = (tmp_path / "steps.jsonl").read_text().strip().split("\n")
        assert len(lines) == len(log.steps)
        parsed = [json.loads(l) for l in lines]
        assert parsed == log.steps
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["config"]["seed"] == cfg.seed
        assert summary["config"]["hyper"]["beta_vl"] == pytest.approx(0.5)
        assert len(summary["epochs"]) == 2
        assert {"eval_dice_mean", "eval_iou_mean"} <= set(summary["epochs"][0])
        assert (tmp_path / "epoch_1.bcvl").exists()
        assert (tmp_path / "epoch_2.bcvl").exists()

    def test_checkpoint_reloads_and_predicts(self, tiny_split, tmp_path):
        tr, _ = tiny_split
        cfg = small_config()
        params, _ = train(cfg, tr, out_dir=tmp_path)
        loaded = M.load_checkpoint(tmp_path / "epoch_1.bcvl")
        rec = tr[0]
        out = M.model_forward(
            loaded, rec.image, tr.concepts[rec.concept_id],
            tr.modalities[rec.modality_id],
            points=[M.PromptPoint(8, 8, "positive")],
        )
        assert out.P.shape == rec.image.shape

    def test_text_only_samples_are_excluded_from_masks(self, tiny_split):
        tr, _ = tiny_split
        _, log = train(small_config(text_only_ratio=0.5), tr)
        assert all(np.isfinite(s["loss"]) for s in log.steps)
        # hard sets draw only from mask-carrying samples
        assert log.refine_passes <= len(log.steps)

    def test_empty_dataset_rejected(self, tiny_split):
        tr, _ = tiny_split
        empty = type(tr)(tr.manifest, [], tr.groups)
        with pytest.raises(ContractError):
            train(small_config(), empty)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_aborts_with_step(self, tiny_split, tmp_path):
        tr, _ = tiny_split
        cfg = small_config(epochs=3, lr=1e50, weight_decay=0.0)
        with pytest.raises(DivergenceError) as exc:
            train(cfg, tr, out_dir=tmp_path)
        assert exc.value.step >= 1
        # the offending step made it into the log before the abort
        lines = (tmp_path / "steps.jsonl").read_text().strip().split("\n")
        last = json.loads(lines[-1])
        assert last["step"] == exc.value.step
        assert last["loss"] is None

    def test_loss_decreases_on_average(self, tiny_split):
        tr, _ = tiny_split
        cfg = small_config(epochs=10, seed=1)
        _, log = train(cfg, tr)
        first = log.epochs[0]["train_loss_mean"]
        last = log.epochs[-1]["train_loss_mean"]
        assert last < first


# -- gradient of the composed objective ------------------------------------------------


def _micro_samples():
    rng = np.random.default_rng(12)
    samples = []
    masks = [(slice(4, 10), slice(5, 12)), (slice(2, 7), slice(3, 8))]
    for i, sl in enumerate(masks):
        img = rng.uniform(0.2, 0.8, size=(16, 16))
        msk = np.zeros((16, 16), dtype=np.uint8)
        msk[sl] = 1
        samples.append((img, msk, "circle" if i == 0 else "square", "plain"))
    return samples


def _micro_loss(params, samples, prompts, w_coeffs, hard_pos, corrective):
    """One training step's objective with every stop-gradient quantity frozen.

    The analytic gradient treats the sample weights, the hard-set choice and
    the corrective points as constants, so the finite-difference probe must
    hold them fixed too.
    """
    outs = []
    dice_losses = []
    for (img, msk, concept, modality), pt in zip(samples, prompts):
        out = M.model_forward(params, img, concept, modality, points=[pt])
        outs.append(out)
        dice_losses.append(soft_dice_loss(out.P, msk))
    l_a = loss_aur(dice_losses, w_coeffs, [1] * len(samples))
    refined = []
    for p in hard_pos:
        img, msk, concept, modality = samples[p]
        _, l_ref = refine_pass(
            params, img, concept, modality, [prompts[p]], corrective[p],
            ground_truth=msk,
        )
        refined.append(l_ref)
    l_h = loss_hitl(refined, [1] * len(refined))
    l_v = sum([_vlm_term(o) for o in outs], _zero_scalar()) * (1.0 / len(outs))
    return total_loss(l_a, l_h, l_v)


@pytest.mark.slow
def test_training_objective_matches_finite_differences():
    hyper = UncertaintyHyper()
    params = fd_model_params(seed=2)
    samples = _micro_samples()
    prompts = [M.PromptPoint(8, 6, "positive"), M.PromptPoint(5, 4, "positive")]

    # freeze the data-dependent coefficients at their base-parameter values
    w_coeffs, corrective = [], {}
    base_outs = []
    for (img, msk, concept, modality), pt in zip(samples, prompts):
        out = M.model_forward(params, img, concept, modality, points=[pt])
        base_outs.append(out)
        l_d = soft_dice_loss(out.P, msk).item()
        rec = uncertainty_record(out.z_img.data, out.P.data, out.z_bar_vlm.data[0], l_d, hyper)
        w_coeffs.append(rec.w)
    hard_pos = [int(np.argmax(w_coeffs))]
    rng = np.random.default_rng(9)
    for p in hard_pos:
        img, msk = samples[p][0], samples[p][1]
        region = error_region(binarize(base_outs[p].P.data), msk)
        corrective[p] = sample_corrective_points(region, 1, rng)

    loss = _micro_loss(params, samples, prompts, w_coeffs, hard_pos, corrective)
    params.zero_grads()
    ad.backward(loss)

    frozen = M.ModelParams(
        params.hyper, {n: Tensor(t.data) for n, t in params.tensors.items()}
    )
    step = 1e-3
    worst = 0.0
    coord_rng = np.random.default_rng(17)
    for name in params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        n_coords = min(3, flat.size)
        coords = coord_rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = _micro_loss(frozen, samples, prompts, w_coeffs, hard_pos, corrective).item()
            flat[c] = orig - step
            dn = _micro_loss(frozen, samples, prompts, w_coeffs, hard_pos, corrective).item()
            flat[c] = orig
            numeric = (up - dn) / (2 * step)
            grad = t.grad.reshape(-1)[c] if t.grad is not None else 0.0
            worst = max(worst, rel_error(grad, numeric))
    assert worst < 1e-3
