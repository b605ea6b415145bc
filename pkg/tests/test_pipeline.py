import json
import struct

import numpy as np
import pandas as pd
import pytest

from cli import build_config, main, parse_args
from conftest import randomized_params, smooth_image
from core.errors import ConfigError
from core.models import DisplacementField, LabelMap
from services.data_service import DataService
from services.pipeline_service import PipelineService, RunConfig


@pytest.fixture
def image_files(tmp_path, rng):
    fixed = smooth_image(rng, (16, 16), sigma=2.0)
    moving = smooth_image(rng, (16, 16), sigma=2.0)
    return (
        DataService.save_tensor(moving, tmp_path / "inputs" / "moving.mft"),
        DataService.save_tensor(fixed, tmp_path / "inputs" / "fixed.mft"),
    )


def read_manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


def test_missing_inputs_are_config_errors(tmp_path):
    config = RunConfig(mode='register', moving=str(tmp_path / "nope.mft"), fixed=str(tmp_path / "nope.mft"))
    with pytest.raises(ConfigError):
        config.validate()
    with pytest.raises(ConfigError):
        RunConfig(mode='register').validate()
    with pytest.raises(ConfigError):
        RunConfig(mode='track', frames=['a.mft']).validate()
    with pytest.raises(ConfigError):
        RunConfig(mode='unknown').validate()


@pytest.mark.parametrize("overrides", [
    {'steps': 0},
    {'lam': -1.0},
    {'scales': '1/3,1'},
    {'profile': 'nonexistent'},
    {'precision': 16},
    {'dims': [16]},
    {'pretrain_cases': -1},
    {'smoothness_reduction': 'median'},
])
def test_invalid_settings_exit_with_config_status(tmp_path, overrides):
    out_dir = tmp_path / "run"
    out_dir.mkdir()
    status = PipelineService.run(RunConfig(mode='benchmark', out_dir=str(out_dir), **overrides))
    assert status == 2
    manifest = read_manifest(out_dir)
    assert manifest['exit_status'] == 2
    assert 'error' in manifest


def test_unparseable_input_exits_with_parse_status(tmp_path, image_files):
    _, fixed = image_files
    broken = tmp_path / "inputs" / "broken.mft"
    broken.write_bytes(b"NOPE" + bytes(32))
    out_dir = tmp_path / "run"
    status = PipelineService.run(RunConfig(mode='register', moving=str(broken), fixed=str(fixed), out_dir=str(out_dir)))
    assert status == 3
    assert read_manifest(out_dir)['exit_status'] == 3


def test_register_writes_all_artifacts(tmp_path, image_files):
    moving, fixed = image_files
    out_dir = tmp_path / "run"
    status = PipelineService.run(RunConfig(
        mode='register', moving=str(moving), fixed=str(fixed), steps=2, seed=3, out_dir=str(out_dir)
    ))
    assert status == 0
    manifest = read_manifest(out_dir)
    assert manifest['exit_status'] == 0
    assert manifest['seed'] == 3
    assert manifest['schedule'] == [0.5, 1.0]
    assert manifest['formats']['tensor'] == {'magic': 'MFT1', 'version': 1}
    expected = {
        'field.mft', 'warped.mft', 'warped.pgm', 'loss_trace.csv', 'metrics.csv', 'report.html',
        'checkpoint.scale0.mfc', 'checkpoint.scale1.mfc',
    }
    assert set(manifest['outputs']) == expected
    assert all((out_dir / name).exists() for name in expected)

    field = DataService.load_tensor(out_dir / "field.mft")
    assert isinstance(field, DisplacementField) and field.dims == (16, 16)
    trace = pd.read_csv(out_dir / "loss_trace.csv")
    assert list(trace.columns) == ['scale', 'step', 'reconstruction', 'smoothness', 'total']
    assert len(trace) == 4
    metrics = pd.read_csv(out_dir / "metrics.csv")
    assert {'masked_mse', 'masked_nlcc', 'smoothness', 'folding_fraction'} <= set(metrics.columns)


def test_register_identical_images_keeps_identity(tmp_path, image_files):
    _, fixed = image_files
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='register', moving=str(fixed), fixed=str(fixed), steps=1, out_dir=str(out_dir)
    )) == 0
    assert DataService.load_tensor(out_dir / "field.mft").is_identity
    assert pd.read_csv(out_dir / "metrics.csv")['masked_mse'].iloc[0] == 0.0


def test_eval_mode_scores_given_field(tmp_path, image_files):
    moving, fixed = image_files
    field_path = DataService.save_tensor(DisplacementField.zeros((16, 16)), tmp_path / "inputs" / "zero.mft")
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='eval', moving=str(fixed), fixed=str(fixed), field_path=str(field_path), out_dir=str(out_dir)
    )) == 0
    metrics = pd.read_csv(out_dir / "metrics.csv")
    assert metrics['masked_mse'].iloc[0] == 0.0
    assert metrics['folding_fraction'].iloc[0] == 0.0


def test_eval_mode_rejects_non_field(tmp_path, image_files):
    moving, fixed = image_files
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='eval', moving=str(moving), fixed=str(fixed), field_path=str(moving), out_dir=str(out_dir)
    )) == 2


def test_track_mode(tmp_path, rng):
    frame = smooth_image(rng, (16, 16))
    paths = [str(DataService.save_tensor(frame, tmp_path / f"frame{k}.mft")) for k in range(3)]
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(mode='track', frames=paths, steps=1, out_dir=str(out_dir))) == 0
    assert (out_dir / "field_pair000.mft").exists() and (out_dir / "field_pair001.mft").exists()
    metrics = pd.read_csv(out_dir / "metrics.csv")
    assert metrics['pair'].tolist() == [0, 1]


@pytest.mark.parametrize("per_pair,trace_rows", [(False, 3), (True, 6)])
def test_track_mode_step_budget(tmp_path, rng, per_pair, trace_rows):
    frame = smooth_image(rng, (16, 16))
    paths = [str(DataService.save_tensor(frame, tmp_path / f"frame{k}.mft")) for k in range(3)]
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='track', frames=paths, scales='1', steps=3, per_pair=per_pair, out_dir=str(out_dir)
    )) == 0
    assert len(pd.read_csv(out_dir / "loss_trace.csv")) == trace_rows


def test_non_finite_input_exits_with_parse_status(tmp_path, image_files):
    _, fixed = image_files
    payload = np.asarray([[np.nan] * 16] * 16, dtype='<f8').tobytes()
    header = json.dumps({'version': 1, 'role': 'image', 'ndim': 2, 'dims': [16, 16], 'dtype': '<f8'}).encode('utf-8')
    broken = tmp_path / "inputs" / "nan.mft"
    broken.write_bytes(b'MFT1' + struct.pack('<I', len(header)) + header + payload)
    out_dir = tmp_path / "run"
    status = PipelineService.run(RunConfig(mode='register', moving=str(broken), fixed=str(fixed), out_dir=str(out_dir)))
    assert status == 3


def test_broken_checkpoint_exits_with_parse_status(tmp_path, image_files, small_config):
    moving, fixed = image_files
    data = DataService.encode_checkpoint(randomized_params(small_config, seed=1))
    length = struct.unpack('<I', data[4:8])[0]
    header = json.loads(data[8:8 + length])
    del header['tensors'][0]['offset']
    encoded = json.dumps(header).encode('utf-8')
    checkpoint = tmp_path / "inputs" / "net.mfc"
    checkpoint.write_bytes(b'MFC1' + struct.pack('<I', len(encoded)) + encoded + data[8 + length:])
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='register', moving=str(moving), fixed=str(fixed), checkpoint=str(checkpoint), out_dir=str(out_dir)
    )) == 3
    assert read_manifest(out_dir)['exit_status'] == 3


def test_segment_with_self_atlas(tmp_path, rng):
    img = smooth_image(rng, (16, 16))
    labels = LabelMap((img.data > 0.5).astype(int) + (img.data > 0.8).astype(int), num_classes=3)
    atlas_dir = tmp_path / "atlases"
    image_path = DataService.save_tensor(img, atlas_dir / "case01.mft")
    label_path = DataService.save_tensor(labels, atlas_dir / "case01.labels.mft")
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='segment', fixed=str(image_path), atlas_dir=str(atlas_dir), labels=str(label_path),
        steps=1, out_dir=str(out_dir)
    )) == 0
    metrics = pd.read_csv(out_dir / "metrics.csv")
    assert metrics['atlas_name'].iloc[0] == 'case01'
    assert metrics['dice_1'].iloc[0] == 1.0
    assert metrics['dice_2'].iloc[0] == 1.0
    assert np.array_equal(DataService.load_tensor(out_dir / "labels.mft").labels, labels.labels)


def test_benchmark_is_reproducible(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out_dir = tmp_path / name
        assert PipelineService.run(RunConfig(
            mode='benchmark', cases=1, dims=[16, 16], max_disp=1.0, steps=1, seed=5, out_dir=str(out_dir)
        )) == 0
        outputs.append(pd.read_csv(out_dir / "benchmark.csv"))
    pd.testing.assert_frame_equal(outputs[0].drop(columns='seconds'), outputs[1].drop(columns='seconds'))
    report = outputs[0]
    assert report['stage'].tolist() == ['1', '1/2', '1']
    assert report[report['final']]['scales'].tolist() == ['1', '1/2,1']
    assert (report['seconds'] >= 0).all()


def test_benchmark_with_pretraining_reports_feedforward(tmp_path):
    out_dir = tmp_path / "run"
    assert PipelineService.run(RunConfig(
        mode='benchmark', cases=1, dims=[16, 16], max_disp=1.0, steps=1, scales='1',
        pretrain_cases=2, seed=5, out_dir=str(out_dir)
    )) == 0
    report = pd.read_csv(out_dir / "benchmark.csv")
    assert report['method'].tolist() == ['feedforward', 'ttt']
    assert "feedforward" in (out_dir / "report.html").read_text()


def test_benchmark_schedules_share_budget():
    schedules = PipelineService.benchmark_schedules(RunConfig(mode='benchmark', profile='echo4', steps=5))
    assert schedules['single'].steps == (20,)
    assert sum(schedules['multi'].steps) == 20
    assert list(PipelineService.benchmark_schedules(RunConfig(mode='benchmark', scales='1', steps=5))) == ['single']


def test_train_mode_writes_checkpoint(tmp_path):
    out_dir = tmp_path / "run"
    target = tmp_path / "models" / "coarse.mfc"
    assert PipelineService.run(RunConfig(
        mode='train', cases=1, dims=[16, 16], steps=2, checkpoint=str(target), out_dir=str(out_dir)
    )) == 0
    params = DataService.load_checkpoint(target)
    assert params.config.ndim == 2
    assert len(pd.read_csv(out_dir / "loss_trace.csv")) == 2
    assert str(target) in read_manifest(out_dir)['outputs']


def test_cli_arguments_map_to_config():
    args = parse_args([
        '--mode', 'register', '--moving', 'm.mft', '--fixed', 'f.pgm', '--lambda', '2.5',
        '--scales', '1/4,1/2,1', '--steps', '7', '--field', 'u.mft', '--no-normalize', '-v'
    ])
    config = build_config(args)
    assert config.mode == 'register'
    assert config.lam == 2.5
    assert config.steps == 7
    assert config.field_path == 'u.mft'
    assert config.normalize is False
    assert config.schedule().scales == (0.25, 0.5, 1.0)
    assert config.smoothness_reduction == 'sum'
    assert config.per_pair is False
    assert config.train_spec().smoothness_reduction == 'sum'


def test_cli_run_options():
    config = build_config(parse_args([
        '--mode', 'track', '--frames', 'a.mft', 'b.mft', '--per-pair',
        '--smoothness-reduction', 'mean', '--pretrain-cases', '3'
    ]))
    assert config.per_pair is True
    assert config.pretrain_cases == 3
    assert config.train_spec().smoothness_reduction == 'mean'
    with pytest.raises(SystemExit):
        parse_args(['--mode', 'track', '--smoothness-reduction', 'median'])


def test_cli_rejects_unknown_mode():
    with pytest.raises(SystemExit):
        parse_args(['--mode', 'fly'])


def test_cli_main_returns_status(tmp_path):
    out_dir = tmp_path / "run"
    out_dir.mkdir()
    status = main(['--mode', 'register', '--moving', str(tmp_path / "x.mft"),
                   '--fixed', str(tmp_path / "y.mft"), '--out-dir', str(out_dir)])
    assert status == 2
