import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ndkit.errors import (
    AlignmentError,
    ArchitectureError,
    ConfigError,
    ShapeError,
    UndefinedMeanError,
)
from ndkit.losses import (
    DistillConfig,
    NegativeCandidateSet,
    ScheduleConfig,
    alpha_schedule,
    combined_loss,
    hard_prediction_targets,
    kd_loss,
    mle_loss,
    mrse,
    nd_attention_loss,
    nd_hidden_loss,
    nd_pred_loss,
    ul_loss,
)
from ndkit.model import ForwardTrace, encode_batch, init_parameters, ModelConfig

from oracles import finite_difference_check


def fval(loss):
    return float(loss.detach())


def hand_trace(logits, mask=None, hidden=None, attention=None):
    """Build a ForwardTrace from explicit tensors (float64)."""
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    b, t, _ = logits.shape
    if mask is None:
        mask = torch.ones(b, t, dtype=torch.bool)
    else:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.dim() == 1:
            mask = mask.unsqueeze(0)
    causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
    attention_mask = causal[None] & mask[:, None, :] & mask[:, :, None]
    return ForwardTrace(
        logits=logits,
        decoder_hidden=[] if hidden is None else hidden,
        decoder_attention=[] if attention is None else attention,
        target_mask=mask,
        attention_mask=attention_mask,
    )


def uniform_logits(batch, length, vocab):
    return torch.zeros(batch, length, vocab, dtype=torch.float64)


class TestMleLoss:
    def test_uniform_model_gives_log_vocab(self):
        trace = hand_trace(uniform_logits(1, 4, 10))
        targets = torch.tensor([[1, 2, 3, 4]])
        loss = mle_loss(trace, targets, 0.0)
        assert float(loss) == pytest.approx(math.log(10), abs=1e-12)

    def test_perfect_model_gives_zero(self):
        logits = torch.full((1, 3, 8), -1000.0, dtype=torch.float64)
        targets = torch.tensor([[2, 5, 7]])
        for pos, tok in enumerate([2, 5, 7]):
            logits[0, pos, tok] = 1000.0
        loss = mle_loss(hand_trace(logits), targets, 0.0)
        assert float(loss) == 0.0

    def test_uniform_model_smoothing_invariant(self):
        trace = hand_trace(uniform_logits(1, 4, 10))
        targets = torch.tensor([[0, 1, 2, 3]])
        smoothed = mle_loss(trace, targets, 0.1)
        assert float(smoothed) == pytest.approx(math.log(10), abs=1e-12)

    def test_matches_explicit_smoothed_cross_entropy(self):
        rng = torch.Generator().manual_seed(3)
        logits = torch.randn(2, 3, 6, generator=rng, dtype=torch.float64)
        targets = torch.tensor([[1, 4, 2], [5, 0, 3]])
        smoothing = 0.2
        loss = mle_loss(hand_trace(logits), targets, smoothing)
        # brute-force: full q * log p sum per position
        expected_samples = []
        for b in range(2):
            acc = 0.0
            for pos in range(3):
                logp = torch.log_softmax(logits[b, pos], dim=-1)
                for v in range(6):
                    q = 1.0 - smoothing if v == targets[b, pos] else smoothing / 5
                    acc -= q * float(logp[v])
            expected_samples.append(acc / 3)
        assert float(loss) == pytest.approx(sum(expected_samples) / 2, abs=1e-12)

    def test_all_masked_raises(self):
        trace = hand_trace(uniform_logits(1, 2, 5), mask=[0, 0])
        with pytest.raises(UndefinedMeanError):
            mle_loss(trace, torch.tensor([[1, 2]]), 0.0)

    def test_mask_excludes_positions(self):
        logits = uniform_logits(1, 3, 5)
        logits[0, 2, :] = torch.tensor([100.0, 0, 0, 0, 0])
        trace = hand_trace(logits, mask=[1, 1, 0])
        loss = mle_loss(trace, torch.tensor([[1, 2, 3]]), 0.0)
        assert float(loss) == pytest.approx(math.log(5), abs=1e-12)


class TestUlLoss:
    def test_empty_candidates_zero(self):
        trace = hand_trace(uniform_logits(1, 3, 6))
        cands = [NegativeCandidateSet(positions=[[], [], []])]
        assert float(ul_loss(trace, cands)) == 0.0

    def test_single_candidate_half_probability(self):
        trace = hand_trace([[[0.0, 0.0]]])  # two tokens, p = 0.5 each
        cands = [NegativeCandidateSet(positions=[[0]])]
        assert float(ul_loss(trace, cands)) == pytest.approx(math.log(2), abs=1e-12)

    def test_probability_near_one_clamped_finite(self):
        trace = hand_trace([[[1000.0, -1000.0]]])
        cands = [NegativeCandidateSet(positions=[[0]])]
        value = float(ul_loss(trace, cands))
        assert math.isfinite(value)
        assert value == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_positional_mean(self):
        # two positions, candidate only on the first
        trace = hand_trace([[[0.0, 0.0], [0.0, 0.0]]])
        cands = [NegativeCandidateSet(positions=[[0], []])]
        assert float(ul_loss(trace, cands)) == pytest.approx(math.log(2) / 2, abs=1e-12)


class TestKdLoss:
    def test_identical_distributions_give_entropy(self):
        rng = torch.Generator().manual_seed(0)
        logits = torch.randn(1, 2, 7, generator=rng, dtype=torch.float64)
        teacher = hand_trace(logits)
        student = hand_trace(logits.clone())
        probs = torch.softmax(logits, dim=-1)
        entropy = float((-probs * probs.log()).sum(-1).mean())
        assert float(kd_loss(teacher, student, 1.0)) == pytest.approx(entropy, abs=1e-12)

    def test_one_hot_teacher_half_student(self):
        teacher = hand_trace([[[1000.0, -1000.0]]])
        student = hand_trace([[[0.0, 0.0]]])
        assert float(kd_loss(teacher, student, 1.0)) == pytest.approx(
            math.log(2), abs=1e-9)

    def test_teacher_gets_no_gradient(self):
        config = ModelConfig(vocab_size=11, dropout_rate=0.0)
        teacher = init_parameters(config, seed=1, dtype=torch.float64)
        student = init_parameters(config, seed=2, dtype=torch.float64)
        batch = encode_batch([([5, 6], [7, 8])], 64)
        t_trace = teacher.forward_trace(batch)  # grad enabled on purpose
        s_trace = student.forward_trace(batch)
        kd_loss(t_trace, s_trace, 2.0).backward()
        assert all(p.grad is None for p in teacher.parameters())
        assert any(p.grad is not None and bool((p.grad != 0).any())
                   for p in student.parameters())

    def test_mask_mismatch_raises(self):
        teacher = hand_trace(uniform_logits(1, 2, 5), mask=[1, 1])
        student = hand_trace(uniform_logits(1, 2, 5), mask=[1, 0])
        with pytest.raises(AlignmentError):
            kd_loss(teacher, student, 1.0)


class TestNdPredLoss:
    def test_avoiding_support_drives_loss_to_zero(self):
        # teacher mass on token 0; student mass on token 1
        teacher = hand_trace([[[1000.0, -1000.0, -1000.0]]])
        student = hand_trace([[[-50.0, 50.0, -50.0]]])
        assert float(nd_pred_loss(teacher, student, 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_teacher_half_student(self):
        teacher = hand_trace([[[1000.0, -1000.0]]])
        student = hand_trace([[[0.0, 0.0]]])
        assert float(nd_pred_loss(teacher, student, 1.0)) == pytest.approx(
            math.log(2), abs=1e-9)

    def test_uniform_teacher_brute_force(self):
        teacher = hand_trace([[[0.0, 0.0]]])
        student = hand_trace([[[0.0, 0.0]]])
        expected = -(0.5 * math.log(0.5) + 0.5 * math.log(0.5))
        assert float(nd_pred_loss(teacher, student, 1.0)) == pytest.approx(
            expected, abs=1e-12)

    def test_opposing_optima_with_kd(self):
        # matching the teacher minimizes KD but maximizes ND-pred, and the
        # anti-support distribution does the reverse
        teacher = hand_trace([[[8.0, -8.0, -8.0]]])
        matching = hand_trace([[[8.0, -8.0, -8.0]]])
        avoiding = hand_trace([[[-8.0, 8.0, 8.0]]])
        assert float(kd_loss(teacher, matching, 1.0)) < float(kd_loss(teacher, avoiding, 1.0))
        assert float(nd_pred_loss(teacher, matching, 1.0)) > float(
            nd_pred_loss(teacher, avoiding, 1.0))

    def test_nonnegative(self):
        rng = torch.Generator().manual_seed(1)
        for _ in range(20):
            teacher = hand_trace(torch.randn(1, 3, 6, generator=rng, dtype=torch.float64))
            student = hand_trace(torch.randn(1, 3, 6, generator=rng, dtype=torch.float64))
            assert float(nd_pred_loss(teacher, student, 1.0)) >= 0.0


class TestMrse:
    def test_identity_exact_one(self):
        a = torch.randn(4, 5, dtype=torch.float64)
        assert float(mrse(a, a.clone())) == 1.0

    def test_single_element(self):
        a = torch.tensor([0.0], dtype=torch.float64)
        b = torch.tensor([1.0], dtype=torch.float64)
        assert float(mrse(a, b)) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_range_and_symmetry(self):
        rng = torch.Generator().manual_seed(2)
        for _ in range(50):
            a = torch.randn(3, 4, generator=rng, dtype=torch.float64) * 3
            b = torch.randn(3, 4, generator=rng, dtype=torch.float64) * 3
            value = float(mrse(a, b))
            assert 0.0 < value <= 1.0
            assert value == float(mrse(b, a))

    def test_monotone_decrease_in_single_element(self):
        a = torch.zeros(2, 3, dtype=torch.float64)
        b = torch.zeros(2, 3, dtype=torch.float64)
        previous = float(mrse(a, b))
        for delta in [0.1, 0.5, 1.0, 2.0, 4.0]:
            b[0, 0] = delta
            current = float(mrse(a, b))
            assert current < previous
            previous = current

    def test_mask_and_errors(self):
        a = torch.zeros(2, 2, dtype=torch.float64)
        b = torch.ones(2, 2, dtype=torch.float64)
        mask = torch.tensor([[True, False], [False, False]])
        assert float(mrse(a, b, mask)) == pytest.approx(math.exp(-1.0), abs=1e-15)
        with pytest.raises(UndefinedMeanError):
            mrse(a, b, torch.zeros(2, 2, dtype=torch.bool))
        with pytest.raises(ShapeError):
            mrse(a, torch.ones(2, 3, dtype=torch.float64))


def model_traces(seed_teacher=1, seed_student=2, vocab=13, layers=2):
    config = ModelConfig(vocab_size=vocab, num_decoder_layers=layers, dropout_rate=0.0)
    teacher = init_parameters(config, seed=seed_teacher, dtype=torch.float64)
    student = init_parameters(config, seed=seed_student, dtype=torch.float64)
    batch = encode_batch([([5, 6, 7], [8, 9]), ([10], [11, 12, 5])], 64)
    with torch.no_grad():
        t_trace = teacher.forward_trace(batch)
    s_trace = student.forward_trace(batch)
    return t_trace, s_trace, batch, student


class TestNdHiddenLoss:
    def test_identical_hidden_states_give_layer_count(self):
        t_trace, s_trace, _, _ = model_traces(seed_teacher=3, seed_student=3)
        assert fval(nd_hidden_loss(t_trace, s_trace)) == pytest.approx(2.0, abs=1e-12)

    def test_far_apart_goes_to_zero(self):
        t_trace, s_trace, _, _ = model_traces()
        far = [h + 100.0 for h in s_trace.decoder_hidden]
        shifted = ForwardTrace(
            logits=s_trace.logits, decoder_hidden=far,
            decoder_attention=s_trace.decoder_attention,
            target_mask=s_trace.target_mask, attention_mask=s_trace.attention_mask)
        assert fval(nd_hidden_loss(t_trace, shifted)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_case_single_position(self):
        mask = torch.tensor([[True]])
        base = hand_trace(uniform_logits(1, 1, 5), mask=[1])
        teacher = ForwardTrace(
            logits=base.logits, decoder_hidden=[torch.zeros(1, 1, 2, dtype=torch.float64)],
            decoder_attention=[], target_mask=mask, attention_mask=base.attention_mask)
        student = ForwardTrace(
            logits=base.logits, decoder_hidden=[torch.ones(1, 1, 2, dtype=torch.float64)],
            decoder_attention=[], target_mask=mask, attention_mask=base.attention_mask)
        assert float(nd_hidden_loss(teacher, student)) == pytest.approx(
            math.exp(-1.0), abs=1e-15)

    def test_layer_count_mismatch(self):
        t_trace, s_trace, _, _ = model_traces()
        chopped = ForwardTrace(
            logits=s_trace.logits, decoder_hidden=s_trace.decoder_hidden[:1],
            decoder_attention=s_trace.decoder_attention,
            target_mask=s_trace.target_mask, attention_mask=s_trace.attention_mask)
        with pytest.raises(ArchitectureError):
            nd_hidden_loss(t_trace, chopped)


class TestNdAttentionLoss:
    def test_identical_scores_give_layer_count(self):
        t_trace, s_trace, _, _ = model_traces(seed_teacher=4, seed_student=4)
        assert fval(nd_attention_loss(t_trace, s_trace)) == pytest.approx(2.0, abs=1e-12)

    def test_masked_entries_excluded(self):
        t_trace, s_trace, _, _ = model_traces()
        baseline = fval(nd_attention_loss(t_trace, s_trace))
        # poke a causally masked entry of the teacher scores
        hacked = [a.clone() for a in t_trace.decoder_attention]
        assert not bool(t_trace.attention_mask[0, 0, 1])
        hacked[0][0, :, 0, 1] = 1e6
        hacked_trace = ForwardTrace(
            logits=t_trace.logits, decoder_hidden=t_trace.decoder_hidden,
            decoder_attention=hacked, target_mask=t_trace.target_mask,
            attention_mask=t_trace.attention_mask)
        assert fval(nd_attention_loss(hacked_trace, s_trace)) == baseline

    def test_hand_case_single_entry(self):
        mask = torch.tensor([[True]])
        base = hand_trace(uniform_logits(1, 1, 5), mask=[1])
        teacher = ForwardTrace(
            logits=base.logits, decoder_hidden=[],
            decoder_attention=[torch.zeros(1, 1, 1, 1, dtype=torch.float64)],
            target_mask=mask, attention_mask=base.attention_mask)
        student = ForwardTrace(
            logits=base.logits, decoder_hidden=[],
            decoder_attention=[torch.ones(1, 1, 1, 1, dtype=torch.float64)],
            target_mask=mask, attention_mask=base.attention_mask)
        assert float(nd_attention_loss(teacher, student)) == pytest.approx(
            math.exp(-1.0), abs=1e-15)

    def test_head_count_mismatch(self):
        t_trace, s_trace, _, _ = model_traces()
        fewer = [a[:, :1] for a in s_trace.decoder_attention]
        chopped = ForwardTrace(
            logits=s_trace.logits, decoder_hidden=s_trace.decoder_hidden,
            decoder_attention=fewer, target_mask=s_trace.target_mask,
            attention_mask=s_trace.attention_mask)
        with pytest.raises(ArchitectureError):
            nd_attention_loss(t_trace, chopped)


class TestAlphaSchedule:
    def test_peak_at_center(self):
        config = ScheduleConfig(peak_scale=4.0, steepness=0.01, center_step=300)
        assert alpha_schedule(300, config) == 1.0  # peak value 4/4

    def test_peak_is_quarter_of_scale(self):
        config = ScheduleConfig(peak_scale=2.5, steepness=0.01, center_step=100)
        assert alpha_schedule(100, config) == pytest.approx(2.5 / 4, abs=1e-15)

    def test_early_tail_vanishes(self):
        config = ScheduleConfig(peak_scale=4.0, steepness=0.1, center_step=1000)
        assert alpha_schedule(0, config) < 1e-10

    def test_evenness(self):
        config = ScheduleConfig(peak_scale=4.0, steepness=0.003, center_step=500)
        for d in range(0, 400, 13):
            assert alpha_schedule(500 + d, config) == alpha_schedule(500 - d, config)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=0, max_value=5000))
    def test_unimodal_over_integer_steps(self, step):
        config = ScheduleConfig(peak_scale=4.0, steepness=0.004, center_step=2000)
        here = alpha_schedule(step, config)
        after = alpha_schedule(step + 1, config)
        if step + 1 <= 2000:
            assert after >= here
        if step >= 2000:
            assert after <= here

    def test_fixed_alpha_wins(self):
        config = ScheduleConfig(peak_scale=4.0, steepness=0.01, center_step=100,
                                fixed_alpha=0.37)
        assert alpha_schedule(0, config) == 0.37
        assert alpha_schedule(100, config) == 0.37

    def test_zero_scale_turns_off(self):
        config = ScheduleConfig(peak_scale=0.0, steepness=0.01, center_step=10)
        assert alpha_schedule(10, config) == 0.0

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigError):
            alpha_schedule(-1, ScheduleConfig())


class TestCombinedLoss:
    def test_alpha_zero_equals_mle_with_zero_nd_gradient(self):
        t_trace, s_trace, batch, student = model_traces()
        config = DistillConfig(label_smoothing=0.1)
        total, breakdown = combined_loss(s_trace, t_trace, batch.targets, 0.0, config)
        expected = mle_loss(s_trace, batch.targets, 0.1)
        assert fval(total) == fval(expected)
        assert breakdown.pred is None and breakdown.hidden is None
        assert breakdown.pred_contribution == 0.0

    def test_alpha_one_kills_mle_gradient(self):
        t_trace, s_trace, batch, student = model_traces()
        config = DistillConfig(include_hidden=False, include_attention=False,
                               label_smoothing=0.0)
        total, _ = combined_loss(s_trace, t_trace, batch.targets, 1.0, config)
        total.backward()
        grads_nd = {n: p.grad.clone() for n, p in student.named_parameters()}
        # pure ND loss on a fresh graph must give identical gradients
        t2, s2, batch2, student2 = model_traces()
        nd_pred_loss(t2, s2, 1.0).backward()
        for (name, p) in student2.named_parameters():
            assert torch.allclose(grads_nd[name], p.grad, atol=1e-12), name

    def test_all_toggles_off(self):
        t_trace, s_trace, batch, _ = model_traces()
        config = DistillConfig(include_pred=False, include_hidden=False,
                               include_attention=False, label_smoothing=0.1)
        total, breakdown = combined_loss(s_trace, t_trace, batch.targets, 0.6, config)
        expected = 0.4 * fval(mle_loss(s_trace, batch.targets, 0.1))
        assert fval(total) == pytest.approx(expected, rel=1e-15)
        assert breakdown.pred is None

    def test_breakdown_sums_to_total(self):
        t_trace, s_trace, batch, _ = model_traces()
        config = DistillConfig(label_smoothing=0.1)
        total, breakdown = combined_loss(s_trace, t_trace, batch.targets, 0.3, config)
        assert sum(breakdown.contributions()) == pytest.approx(fval(total), abs=1e-9)
        assert breakdown.total == fval(total)

    def test_alpha_out_of_range(self):
        t_trace, s_trace, batch, _ = model_traces()
        with pytest.raises(ConfigError):
            combined_loss(s_trace, t_trace, batch.targets, 1.2, DistillConfig())

    def test_hard_targets_are_teacher_argmax(self):
        t_trace, s_trace, batch, _ = model_traces()
        one_hot = hard_prediction_targets(t_trace)
        assert torch.equal(one_hot.argmax(-1), t_trace.logits.argmax(-1))
        assert torch.all(one_hot.sum(-1) == 1.0)
        config = DistillConfig(target_mode="hard", include_hidden=False,
                               include_attention=False, label_smoothing=0.0)
        total, breakdown = combined_loss(s_trace, t_trace, batch.targets, 0.5, config)
        assert math.isfinite(fval(total))


class TestGradients:
    """Module-level finite-difference spot checks (full suite in acceptance)."""

    def loss_functions(self):
        config = ModelConfig(vocab_size=11, dropout_rate=0.0)
        teacher = init_parameters(config, seed=7, dtype=torch.float64)
        student = init_parameters(config, seed=8, dtype=torch.float64)
        batch = encode_batch([([5, 6], [7, 8, 9]), ([10, 4], [6])], 64)
        rng = random.Random(5)
        candidates = [
            NegativeCandidateSet(positions=[[5, 7], [4], [], []]),
            NegativeCandidateSet(positions=[[9], []]),
        ]

        def teacher_trace():
            with torch.no_grad():
                return teacher.forward_trace(batch)

        return {
            "ul": lambda: ul_loss(student.forward_trace(batch), candidates),
            "nd_hidden": lambda: nd_hidden_loss(teacher_trace(),
                                                student.forward_trace(batch)),
            "nd_attention": lambda: nd_attention_loss(teacher_trace(),
                                                      student.forward_trace(batch)),
        }, student, rng

    def test_spot_checks(self):
        fns, student, rng = self.loss_functions()
        for name, fn in fns.items():
            worst, checked, failures = finite_difference_check(
                fn, student, indices_per_param=1, rng=rng, max_params=40)
            assert not failures, (name, failures)
