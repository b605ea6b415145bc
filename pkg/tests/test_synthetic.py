import numpy as np
import pytest

from config import SYNTHETIC
from core.errors import InvalidArgumentError
from core.models import DisplacementField
from core.optim import TrainSpec
from core.regnet import NetConfig, init_params
from core.warp import warp
from services.evaluation_service import EvaluationService
from services.registration_service import RegistrationService, ScaleSchedule
from services.synthetic_service import BENCHMARK_COLUMNS, SyntheticService
from services.training_service import TrainingService


def test_zero_displacement_case_is_exact():
    case = SyntheticService.make_synthetic_case((16, 16), max_disp=0.0, seed=3)
    assert case.field.is_identity
    assert np.array_equal(case.warped.data, case.base.data)


def test_cases_are_deterministic_per_seed():
    first = SyntheticService.make_synthetic_case((16, 12), max_disp=2.0, seed=5)
    second = SyntheticService.make_synthetic_case((16, 12), max_disp=2.0, seed=5)
    other = SyntheticService.make_synthetic_case((16, 12), max_disp=2.0, seed=6)
    assert np.array_equal(first.field.vectors, second.field.vectors)
    assert np.array_equal(first.warped.data, second.warped.data)
    assert not np.array_equal(first.field.vectors, other.field.vectors)


@pytest.mark.parametrize("max_disp", [0.5, 3.0, 7.5])
def test_field_peak_norm_equals_max_disp(max_disp):
    case = SyntheticService.make_synthetic_case((20, 20), max_disp=max_disp, seed=1)
    assert case.field.norms().max() == pytest.approx(max_disp, rel=1e-12)


def test_same_seed_same_texture_regardless_of_displacement():
    still = SyntheticService.make_synthetic_case((16, 16), max_disp=0.0, seed=9)
    moved = SyntheticService.make_synthetic_case((16, 16), max_disp=4.0, seed=9)
    assert np.array_equal(still.base.data, moved.base.data)


def test_case_images_and_warp_relation():
    case = SyntheticService.make_synthetic_case((16, 16), max_disp=2.0, seed=2)
    assert case.base.data.min() >= 0.0 and case.base.data.max() <= 1.0
    assert case.moving is case.base
    assert case.fixed is case.warped
    np.testing.assert_array_equal(warp(case.base, case.field).data, case.warped.data)


def test_case_3d():
    case = SyntheticService.make_synthetic_case((8, 10, 6), max_disp=1.5, seed=0)
    assert case.field.vectors.shape == (8, 10, 6, 3)
    assert case.warped.dims == (8, 10, 6)


def test_case_with_labels():
    case = SyntheticService.make_synthetic_case((32, 32), max_disp=2.0, seed=4, with_labels=True)
    assert case.labels.num_classes == 3
    assert set(case.labels.present_classes()) == {0, 1, 2}
    assert case.warped_labels.dims == (32, 32)
    expected = EvaluationService.warp_labels(case.labels, case.field)
    assert np.array_equal(case.warped_labels.labels, expected.labels)


def test_negative_displacement_rejected():
    with pytest.raises(InvalidArgumentError):
        SyntheticService.make_synthetic_case((8, 8), max_disp=-1.0)


def test_sequence_frames_chain():
    sequence = SyntheticService.make_synthetic_sequence((16, 16), frames=4, max_disp=1.0, seed=2)
    assert len(sequence.frames) == 4
    assert len(sequence.fields) == 3
    for k, displacement in enumerate(sequence.fields):
        np.testing.assert_array_equal(warp(sequence.frames[k], displacement).data, sequence.frames[k + 1].data)
    with pytest.raises(InvalidArgumentError):
        SyntheticService.make_synthetic_sequence((16, 16), frames=1)


def test_score_case_with_true_field_is_perfect():
    case = SyntheticService.make_synthetic_case((24, 24), max_disp=2.0, seed=8, with_labels=True)
    row = SyntheticService.score_case(case, case.field)
    assert row['ee_max'] == 0.0
    assert row['masked_mse'] == 0.0
    assert row['dice_1'] == 1.0 and row['dice_2'] == 1.0


def test_score_case_without_labels_has_nan_dice():
    case = SyntheticService.make_synthetic_case((16, 16), max_disp=2.0, seed=8)
    row = SyntheticService.score_case(case, DisplacementField.zeros((16, 16)))
    assert row['ee_max'] == pytest.approx(2.0)
    assert np.isnan(row['dice_1'])


def test_benchmark_is_deterministic(small_config):
    schedules = {'single': ScaleSchedule((1.0,), steps=(2,)), 'multi': ScaleSchedule((0.5, 1.0), steps=(1, 1))}
    kwargs = dict(cases=2, dims=(16, 16), max_disp=1.5, seed=10, net_config=small_config)
    first = SyntheticService.run_benchmark(schedules, TrainSpec(), **kwargs)
    second = SyntheticService.run_benchmark(schedules, TrainSpec(), **kwargs)
    assert list(first.columns) == BENCHMARK_COLUMNS
    assert len(first) == 6
    assert first['scales'].tolist() == ['1', '1/2,1', '1/2,1'] * 2
    assert first['stage'].tolist() == ['1', '1/2', '1'] * 2
    assert first['final'].tolist() == [True, False, True] * 2
    assert set(first['method']) == {'ttt'}
    assert first.drop(columns='seconds').equals(second.drop(columns='seconds'))
    summary = SyntheticService.summarize(first)
    assert sorted(summary['scales']) == ['1', '1/2,1']
    assert 'stage' not in summary.columns


def test_benchmark_stage_rows_score_intermediate_fields(small_config):
    schedule = ScaleSchedule((0.5, 1.0), steps=(2, 2))
    spec = TrainSpec()
    report = SyntheticService.run_benchmark({'multi': schedule}, spec, cases=1, dims=(16, 16), max_disp=1.5, seed=4, net_config=small_config)
    case = SyntheticService.make_synthetic_case((16, 16), max_disp=1.5, seed=4)
    result = RegistrationService.register_multiscale(case.moving, case.fixed, schedule, spec, net_config=small_config)
    for index, row in enumerate(report.itertuples()):
        expected = SyntheticService.score_case(case, result.per_scale_fields[index])
        assert row.ee_median == expected['ee_median']
        assert row.masked_mse == expected['masked_mse']
    seconds = report['seconds'].tolist()
    assert 0.0 <= seconds[0] <= seconds[1]


def test_benchmark_with_pretrained_adds_feedforward_row(small_config):
    spec = TrainSpec(steps=2)
    pretrained, trace = SyntheticService.pretrain(spec, cases=2, dims=(16, 16), max_disp=1.5, seed=0, net_config=small_config)
    assert len(trace) == 2
    schedules = {'single': ScaleSchedule((1.0,), steps=(2,))}
    report = SyntheticService.run_benchmark(
        schedules, spec, cases=2, dims=(16, 16), max_disp=1.5, seed=0, net_config=small_config, pretrained=pretrained
    )
    assert report['method'].tolist() == ['feedforward', 'ttt'] * 2
    feedforward = report[report['method'] == 'feedforward'].iloc[0]
    case = SyntheticService.make_synthetic_case((16, 16), max_disp=1.5, seed=0)
    inferred = RegistrationService.infer_multiscale(case.moving, case.fixed, ScaleSchedule((1.0,)), [pretrained])
    assert feedforward['ee_median'] == SyntheticService.score_case(case, inferred.final_field)['ee_median']
    summary = SyntheticService.summarize(report)
    assert sorted(zip(summary['method'], summary['scales'])) == [('feedforward', '1'), ('ttt', '1')]


def test_pretraining_cases_are_disjoint_from_benchmark_cases(small_config):
    spec = TrainSpec(steps=1)
    first, _ = SyntheticService.pretrain(spec, cases=1, dims=(16, 16), seed=0, net_config=small_config)
    case = SyntheticService.make_synthetic_case((16, 16), seed=SYNTHETIC['PRETRAIN_SEED_OFFSET'])
    pairs = [(case.moving, case.fixed)]
    expected, _ = TrainingService.train_population(init_params(small_config, spec.seed), pairs, spec)
    for name, value in expected.tensors.items():
        np.testing.assert_array_equal(first.tensors[name], value)
    with pytest.raises(InvalidArgumentError):
        SyntheticService.pretrain(spec, cases=0, dims=(16, 16), net_config=small_config)


def test_benchmark_argument_checks():
    with pytest.raises(InvalidArgumentError):
        SyntheticService.run_benchmark({}, TrainSpec(), cases=1)
    with pytest.raises(InvalidArgumentError):
        SyntheticService.run_benchmark({'one': ScaleSchedule((1.0,))}, TrainSpec(), cases=0)


ACCEPTANCE_CONFIG = NetConfig(ndim=2, encoder_channels=(8, 16, 16), decoder_channels=(16, 16, 8))
ACCEPTANCE_SPEC = TrainSpec(lam=1.0, lr=1e-3, smoothness_reduction='mean')


@pytest.mark.slow
def test_single_scale_recovers_small_deformations():
    schedules = {'single': ScaleSchedule((1.0,), steps=(3500,))}
    report = SyntheticService.run_benchmark(
        schedules, ACCEPTANCE_SPEC, cases=10, dims=(64, 64), max_disp=5.0, seed=0, net_config=ACCEPTANCE_CONFIG
    )
    assert len(report) == 10
    assert report['ee_median'].median() < 1.0
    assert report['masked_nlcc'].median() > 0.9


@pytest.mark.slow
def test_multiscale_beats_single_scale_on_large_motion():
    budget = 3500
    schedules = {
        'single': ScaleSchedule.equal_budget((1.0,), budget),
        'multi': ScaleSchedule.equal_budget((0.125, 0.25, 0.5, 1.0), budget),
    }
    report = SyntheticService.run_benchmark(
        schedules, ACCEPTANCE_SPEC, cases=10, dims=(128, 128), max_disp=12.0, seed=20, net_config=ACCEPTANCE_CONFIG
    )
    final = report[report['final']].set_index(['seed', 'scales'])
    seeds = sorted(set(report['seed']))
    single = final.xs('1', level='scales').loc[seeds]
    multi = final.xs('1/8,1/4,1/2,1', level='scales').loc[seeds]
    assert int((multi['ee_median'].values < single['ee_median'].values).sum()) >= 8
    assert int((multi['masked_mse'].values < single['masked_mse'].values).sum()) >= 8


@pytest.mark.slow
def test_test_time_training_improves_on_feedforward():
    spec = TrainSpec(lam=1.0, lr=1e-3, smoothness_reduction='mean', steps=2000, seed=0)
    pretrained, _ = SyntheticService.pretrain(
        spec, cases=20, dims=(64, 64), max_disp=5.0, seed=100, net_config=ACCEPTANCE_CONFIG
    )
    tuned_spec = spec.with_steps(500)
    loss_wins = 0
    ee_wins = 0
    for seed in range(5):
        case = SyntheticService.make_synthetic_case((64, 64), max_disp=5.0, seed=seed)
        window = tuned_spec.window_for(case.fixed.dims)
        before, predicted, _ = TrainingService.evaluate_pair(pretrained, case.moving, case.fixed, tuned_spec, window)
        tuned, tuned_field, _ = TrainingService.test_time_train(pretrained, case.moving, case.fixed, tuned_spec)
        after, _, _ = TrainingService.evaluate_pair(tuned, case.moving, case.fixed, tuned_spec, window)
        loss_wins += int(after.total < before.total)
        ee_before = EvaluationService.endpoint_error(predicted, case.field)[1]
        ee_after = EvaluationService.endpoint_error(tuned_field, case.field)[1]
        ee_wins += int(ee_after <= ee_before)
    assert loss_wins >= 4
    assert ee_wins >= 4


@pytest.mark.slow
def test_atlas_segmentation_recovers_phantom_labels():
    schedule = ScaleSchedule.equal_budget((0.25, 0.5, 1.0), 1500)
    recovered = 0
    for seed in range(10):
        case = SyntheticService.make_synthetic_case((64, 64), max_disp=5.0, seed=seed, with_labels=True)
        result = EvaluationService.segment(
            case.fixed, [case.moving], [case.labels], schedule, ACCEPTANCE_SPEC,
            truth=case.warped_labels, net_config=ACCEPTANCE_CONFIG
        )
        recovered += int(result.dice[1] > 0.9 and result.dice[2] > 0.9)
    assert recovered >= 8
