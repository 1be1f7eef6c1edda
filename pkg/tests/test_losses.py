import math

import numpy as np
import pytest

from gradcheck import finite_difference_gradients, relative_error
from trajmodes.autodiff import Tensor
from trajmodes.geometry import MultimodalPrediction, Trajectory
from trajmodes.losses import (
    ANGLE,
    DISPLACEMENT,
    DistancePolicy,
    EmptyBatch,
    HorizonMismatch,
    MtpConfig,
    SingularCovariance,
    angle_distance,
    displacement_loss,
    mdn_loss,
    me_loss,
    mtp_loss,
    pick_winners,
    select_best_mode,
    training_loss,
)
from trajmodes.network import MDN, ModelConfig


def traj(points, dt=0.1):
    return Trajectory(np.asarray(points, dtype=float), dt=dt)


def straight(speed, n=60, bearing=0.0, dt=0.1):
    s = speed * dt * np.arange(1, n + 1)
    return traj(np.stack([s * math.cos(bearing), s * math.sin(bearing)], axis=1),
                dt=dt)


def arc(speed, radius, n=60, dt=0.1):
    """Right-turning constant-speed arc starting along +x."""
    s = speed * dt * np.arange(1, n + 1)
    theta = s / radius
    return traj(np.stack([radius * np.sin(theta),
                          -radius * (1.0 - np.cos(theta))], axis=1), dt=dt)


class TestDisplacement:
    def test_identical_is_zero(self):
        t = straight(10.0)
        assert displacement_loss(t, t) == 0.0

    def test_constant_offset(self):
        t = straight(10.0)
        shifted = traj(t.points + [0.0, 1.0])
        assert displacement_loss(t, shifted) == pytest.approx(1.0, abs=1e-12)

    def test_hand_case_three_point_five(self):
        gt = traj([(1.0, 0.0), (2.0, 0.0)])
        pred = traj([(1.0, 3.0), (2.0, 4.0)])
        assert displacement_loss(gt, pred) == pytest.approx(3.5, abs=1e-12)

    def test_metric_like_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = traj(rng.normal(0, 10, (12, 2)))
            b = traj(rng.normal(0, 10, (12, 2)))
            assert displacement_loss(a, b) >= 0
            assert displacement_loss(a, b) == pytest.approx(
                displacement_loss(b, a), abs=1e-12)
        a = traj(rng.normal(0, 10, (12, 2)))
        assert displacement_loss(a, a) == 0.0

    def test_horizon_mismatch(self):
        with pytest.raises(HorizonMismatch):
            displacement_loss(straight(10, n=4), straight(10, n=5))


class TestAngleDistance:
    def test_right_angle(self):
        assert angle_distance(straight(10), straight(10, bearing=math.pi / 2)) \
            == pytest.approx(math.pi / 2)

    def test_identical_endpoints(self):
        assert angle_distance(straight(10), straight(10)) == 0.0

    def test_forty_five_degrees(self):
        assert angle_distance(straight(10), straight(10, bearing=math.pi / 4)) \
            == pytest.approx(math.pi / 4)


class TestSelectBestMode:
    def test_single_mode(self):
        policy = DistancePolicy()
        assert select_best_mode(straight(10), [straight(8)], policy) == 0

    def test_displacement_policy_matches_brute_force(self):
        rng = np.random.default_rng(1)
        policy = DistancePolicy()
        for _ in range(200):
            m = rng.integers(1, 9)
            gt = traj(rng.normal(0, 10, (8, 2)))
            modes = [traj(rng.normal(0, 10, (8, 2))) for _ in range(m)]
            best = min(range(m), key=lambda i: displacement_loss(gt, modes[i]))
            assert select_best_mode(gt, modes, policy) == best

    def test_intersection_scene_prefers_angle_under_angle_policy(self):
        # A slow, straight ground truth against a fast straight mode and a
        # gentle right-turn mode: the turn is closer by displacement, the
        # straight mode is aligned by angle.
        gt = straight(5.0)
        fast_straight = straight(10.0)
        slow_turn = arc(5.0, radius=40.0)
        disp_policy = DistancePolicy(kind=DISPLACEMENT)
        angle_policy = DistancePolicy(kind=ANGLE)
        # construction is only valid if both inequalities genuinely hold
        assert displacement_loss(gt, slow_turn) < displacement_loss(gt, fast_straight)
        assert angle_distance(gt, fast_straight) < angle_policy.angle_threshold
        assert angle_distance(gt, slow_turn) > angle_policy.angle_threshold

        modes = [fast_straight, slow_turn]
        assert select_best_mode(gt, modes, disp_policy) == 1
        assert select_best_mode(gt, modes, angle_policy) == 0

    def test_tie_break_among_qualifying_modes_uses_displacement(self):
        gt = straight(10.0)
        near_angle_far_disp = straight(5.0, bearing=math.radians(2.0))
        far_angle_near_disp = straight(10.0, bearing=math.radians(4.0))
        policy = DistancePolicy(kind=ANGLE)
        assert angle_distance(gt, near_angle_far_disp) < policy.angle_threshold
        assert angle_distance(gt, far_angle_near_disp) < policy.angle_threshold
        assert displacement_loss(gt, far_angle_near_disp) < \
            displacement_loss(gt, near_angle_far_disp)
        assert select_best_mode(
            gt, [near_angle_far_disp, far_angle_near_disp], policy) == 1

    def test_degenerate_ground_truth_falls_back_to_displacement(self):
        gt = traj(np.zeros((6, 2)))
        close = traj(np.full((6, 2), 0.1))
        far = traj(np.full((6, 2), 5.0))
        assert select_best_mode(gt, [far, close], DistancePolicy(kind=ANGLE)) == 1

    def test_degenerate_mode_never_qualifies(self):
        gt = straight(10.0)
        stopped = traj(np.zeros((60, 2)))
        aligned = straight(9.0)
        assert select_best_mode(gt, [stopped, aligned],
                                DistancePolicy(kind=ANGLE)) == 1

    def test_ties_resolve_to_lowest_index(self):
        gt = straight(10.0)
        same = straight(8.0)
        assert select_best_mode(gt, [same, same], DistancePolicy()) == 0


class TestMeLoss:
    def test_expectation(self):
        gt = straight(10.0)
        pred = MultimodalPrediction(
            modes=(traj(gt.points + [0.0, 2.0]), traj(gt.points + [0.0, 4.0])),
            probabilities=[0.5, 0.5])
        assert me_loss(gt, pred) == pytest.approx(3.0, abs=1e-12)

    def test_exact_mode_with_full_probability(self):
        gt = straight(10.0)
        pred = MultimodalPrediction(
            modes=(gt, traj(gt.points + [0.0, 9.0])), probabilities=[1.0, 0.0])
        assert me_loss(gt, pred) == 0.0

    def test_single_mode_reduces_to_displacement(self):
        gt = straight(10.0)
        other = straight(7.0)
        pred = MultimodalPrediction(modes=(other,), probabilities=[1.0])
        assert me_loss(gt, pred) == pytest.approx(displacement_loss(gt, other))

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(2)
        gt = traj(rng.normal(0, 5, (10, 2)))
        modes = tuple(traj(rng.normal(0, 5, (10, 2))) for _ in range(4))
        probs = rng.dirichlet(np.ones(4))
        perm = rng.permutation(4)
        a = me_loss(gt, MultimodalPrediction(modes=modes, probabilities=probs))
        b = me_loss(gt, MultimodalPrediction(
            modes=tuple(modes[i] for i in perm), probabilities=probs[perm]))
        assert a == pytest.approx(b, abs=1e-12)


class TestMtpLoss:
    def test_exact_winner_with_certainty_is_zero(self):
        gt = straight(10.0)
        pred = MultimodalPrediction(modes=(gt, straight(5.0)),
                                    probabilities=[1.0 - 1e-15, 1e-15])
        value, winner = mtp_loss(gt, pred)
        assert winner == 0
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_plug_in_case_ln2_plus_2(self):
        gt = straight(10.0)
        winner_mode = traj(gt.points + [0.0, 2.0])   # displacement 2.0
        loser_mode = traj(gt.points + [0.0, 50.0])
        pred = MultimodalPrediction(modes=(winner_mode, loser_mode),
                                    probabilities=[0.5, 0.5])
        value, winner = mtp_loss(gt, pred, MtpConfig(alpha=1.0))
        assert winner == 0
        assert value == pytest.approx(math.log(2.0) + 2.0, abs=1e-9)

    def test_alpha_zero_is_pure_cross_entropy(self):
        gt = straight(10.0)
        pred = MultimodalPrediction(
            modes=(traj(gt.points + [0.0, 2.0]), traj(gt.points + [0.0, 50.0])),
            probabilities=[0.25, 0.75])
        value, _ = mtp_loss(gt, pred, MtpConfig(alpha=0.0))
        assert value == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_single_mode_equals_alpha_displacement(self):
        gt = straight(10.0)
        mode = straight(8.0)
        pred = MultimodalPrediction(modes=(mode,), probabilities=[1.0])
        value, winner = mtp_loss(gt, pred, MtpConfig(alpha=1.0))
        assert winner == 0
        assert value == pytest.approx(displacement_loss(gt, mode), abs=1e-12)

    def test_winner_permutes_consistently(self):
        rng = np.random.default_rng(3)
        gt = traj(rng.normal(0, 5, (10, 2)))
        modes = tuple(traj(rng.normal(0, 5, (10, 2))) for _ in range(4))
        probs = rng.dirichlet(np.ones(4))
        _, winner = mtp_loss(gt, MultimodalPrediction(modes=modes,
                                                      probabilities=probs))
        perm = np.array([2, 0, 3, 1])
        _, winner_p = mtp_loss(gt, MultimodalPrediction(
            modes=tuple(modes[i] for i in perm), probabilities=probs[perm]))
        assert perm[winner_p] == winner


def spd_prediction(gt, mode_offsets, probs, cov):
    modes = tuple(traj(gt.points + off) for off in mode_offsets)
    return MultimodalPrediction(modes=modes, probabilities=probs,
                                covariances=cov)


class TestMdnLoss:
    def test_standard_normal_at_mean(self):
        gt = traj([(5.0, 5.0)])
        pred = spd_prediction(gt, [(0.0, 0.0)], [1.0],
                              np.eye(2)[None, None])
        assert mdn_loss(gt, pred) == pytest.approx(math.log(2 * math.pi), abs=1e-9)

    def test_identical_modes_mixture_identity(self):
        gt = traj([(5.0, 5.0)])
        single = spd_prediction(gt, [(0.3, -0.2)], [1.0], np.eye(2)[None, None])
        double = spd_prediction(gt, [(0.3, -0.2), (0.3, -0.2)], [0.5, 0.5],
                                np.tile(np.eye(2), (2, 1, 1, 1)))
        assert mdn_loss(gt, double) == pytest.approx(mdn_loss(gt, single), abs=1e-12)

    def test_matches_naive_product_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            h, m = 3, 2
            gt = traj(rng.normal(0, 1, (h, 2)))
            offsets = rng.normal(0, 1, (m, h, 2))
            probs = rng.dirichlet(np.ones(m))
            cov = np.zeros((m, h, 2, 2))
            for i in range(m):
                for j in range(h):
                    a = rng.normal(0, 1, (2, 2))
                    cov[i, j] = a @ a.T + 0.5 * np.eye(2)
            modes = tuple(traj(gt.points + offsets[i]) for i in range(m))
            pred = MultimodalPrediction(modes=modes, probabilities=probs,
                                        covariances=cov)
            # naive oracle: direct densities, no log-space tricks
            total = 0.0
            for i in range(m):
                prod = probs[i]
                for j in range(h):
                    d = gt.points[j] - modes[i].points[j]
                    det = np.linalg.det(cov[i, j])
                    prod *= math.exp(-0.5 * d @ np.linalg.inv(cov[i, j]) @ d) / (
                        2 * math.pi * math.sqrt(det))
                total += prod
            assert mdn_loss(gt, pred) == pytest.approx(-math.log(total), abs=1e-9)

    def test_singular_covariance_rejected(self):
        gt = traj([(1.0, 0.0)])
        cov = np.array([[[[1e-7, 0.0], [0.0, 1e-7]]]])
        pred = spd_prediction(gt, [(0.0, 0.0)], [1.0], cov)
        with pytest.raises(SingularCovariance):
            mdn_loss(gt, pred)

    def test_finite_for_small_eigenvalues(self):
        rng = np.random.default_rng(5)
        gt = traj(rng.normal(0, 30, (5, 2)))
        cov = np.tile(1e-6 * np.eye(2), (2, 5, 1, 1))
        pred = spd_prediction(gt, [(40.0, 40.0), (-40.0, 10.0)], [0.5, 0.5], cov)
        assert np.isfinite(mdn_loss(gt, pred))


def fd_config(head="regression"):
    return ModelConfig(in_channels=1, in_height=16, in_width=16,
                       conv_layers=((2, 3, 2),), dense_units=(4,),
                       num_modes=2, horizon=4, head=head, seed=0)


def check_loss_gradient(kind, head="regression", alpha=1.0):
    cfg = fd_config(head)
    rng = np.random.default_rng(hash(kind) % 2 ** 32)
    batch = 3
    raw = rng.normal(0, 2.0, (batch, cfg.output_dim))
    gt = rng.normal(0, 3.0, (batch, cfg.horizon, 2))
    mtp = MtpConfig(alpha=alpha)
    policy = DistancePolicy(kind=ANGLE if kind == "mtp-angle" else DISPLACEMENT)
    from trajmodes.network import split_output
    winners = pick_winners(
        split_output(Tensor(raw), cfg)[0].data, gt, policy)

    t = Tensor(raw.copy(), requires_grad=True)
    loss, _ = training_loss(t, gt, cfg, kind, mtp, winners=winners)
    loss.backward()

    def fn(params):
        value, _ = training_loss(Tensor(params["raw"]), gt, cfg, kind, mtp,
                                 winners=winners)
        return value.item()

    fd = finite_difference_gradients(fn, {"raw": raw.copy()})
    assert relative_error(t.grad, fd["raw"]) < 1e-4
    return t.grad


class TestTrainingLossGradients:
    def test_me_gradient(self):
        check_loss_gradient("me")

    def test_mtp_displacement_gradient(self):
        check_loss_gradient("mtp-disp")

    def test_mtp_angle_gradient(self):
        check_loss_gradient("mtp-angle")

    def test_mdn_gradient_through_cholesky(self):
        check_loss_gradient("mdn", head=MDN)

    def test_stp_gradient(self):
        cfg = ModelConfig(in_channels=1, in_height=16, in_width=16,
                          conv_layers=((2, 3, 2),), dense_units=(4,),
                          num_modes=1, horizon=4)
        rng = np.random.default_rng(11)
        raw = rng.normal(0, 2.0, (2, cfg.output_dim))
        gt = rng.normal(0, 3.0, (2, 4, 2))
        t = Tensor(raw.copy(), requires_grad=True)
        loss, _ = training_loss(t, gt, cfg, "stp")
        loss.backward()

        def fn(params):
            value, _ = training_loss(Tensor(params["raw"]), gt, cfg, "stp")
            return value.item()
        fd = finite_difference_gradients(fn, {"raw": raw.copy()})
        assert relative_error(t.grad, fd["raw"]) < 1e-4

    def test_alpha_zero_stops_position_gradients(self):
        grad = check_loss_gradient("mtp-disp", alpha=0.0)
        cfg = fd_config()
        np.testing.assert_array_equal(grad[:, cfg.position_slice()], 0.0)
        assert np.any(grad[:, cfg.logit_slice()] != 0.0)

    def test_winner_take_all_gradient_routing(self):
        # only the winning mode's positions receive regression gradient
        cfg = fd_config()
        rng = np.random.default_rng(12)
        raw = rng.normal(0, 2.0, (1, cfg.output_dim))
        gt = rng.normal(0, 3.0, (1, cfg.horizon, 2))
        t = Tensor(raw.copy(), requires_grad=True)
        loss, winners = training_loss(t, gt, cfg, "mtp-disp")
        loss.backward()
        pos_grad = t.grad[0, cfg.position_slice()].reshape(2, cfg.horizon, 2)
        winner = winners[0]
        assert np.any(pos_grad[winner] != 0.0)
        np.testing.assert_array_equal(pos_grad[1 - winner], 0.0)
        logit_grad = t.grad[0, cfg.logit_slice()]
        assert np.all(logit_grad != 0.0)

    def test_empty_batch(self):
        cfg = fd_config()
        with pytest.raises(EmptyBatch):
            training_loss(Tensor(np.zeros((0, cfg.output_dim))),
                          np.zeros((0, 4, 2)), cfg, "me")

    def test_unknown_kind(self):
        cfg = fd_config()
        with pytest.raises(ValueError):
            training_loss(Tensor(np.zeros((1, cfg.output_dim))),
                          np.zeros((1, 4, 2)), cfg, "banana")
