import io
import json
import struct

import numpy as np
import pandas as pd
import pytest

from conftest import randomized_params
from core.errors import BadMagicError, TensorParseError, TruncatedPayloadError, UnsupportedRoleError
from core.models import DisplacementField, Image, LabelMap, Mask
from services.data_service import DataService


def container(header, payload=b''):
    encoded = json.dumps(header).encode('utf-8')
    return b'MFT1' + struct.pack('<I', len(encoded)) + encoded + payload


def test_image_round_trip_is_bit_identical(rng):
    for dtype in (np.float32, np.float64):
        img = Image(rng.random((5, 7)).astype(dtype))
        decoded = DataService.decode_tensor(DataService.encode_tensor(img))
        assert isinstance(decoded, Image)
        assert decoded.dtype == dtype
        assert np.array_equal(decoded.data, img.data)


def test_field_mask_and_labels_round_trip(rng):
    field = DisplacementField(rng.standard_normal((3, 4, 5, 3)), scale=0.25)
    decoded = DataService.decode_tensor(DataService.encode_tensor(field))
    assert np.array_equal(decoded.vectors, field.vectors)
    assert decoded.scale == 0.25

    mask = Mask(rng.random((6, 6)) > 0.5)
    assert np.array_equal(DataService.decode_tensor(DataService.encode_tensor(mask)).flags, mask.flags)

    labels = LabelMap([[0, 2], [1, 1]], num_classes=5)
    decoded = DataService.decode_tensor(DataService.encode_tensor(labels))
    assert np.array_equal(decoded.labels, labels.labels)
    assert decoded.num_classes == 5


def test_header_layout():
    data = DataService.encode_tensor(Image(np.zeros((2, 3))))
    assert data[:4] == b'MFT1'
    (length,) = struct.unpack_from('<I', data, 4)
    header = json.loads(data[8:8 + length])
    assert header == {'version': 1, 'role': 'image', 'ndim': 2, 'dims': [2, 3], 'dtype': '<f8'}
    assert len(data) == 8 + length + 6 * 8


def test_truncated_payload_reports_offset():
    data = DataService.encode_tensor(Image(np.ones((4, 4))))[:-3]
    with pytest.raises(TruncatedPayloadError) as info:
        DataService.decode_tensor(data)
    assert info.value.offset == len(data)


def test_truncated_header_reports_offset():
    data = DataService.encode_tensor(Image(np.ones((4, 4))))[:12]
    with pytest.raises(TruncatedPayloadError) as info:
        DataService.decode_tensor(data)
    assert info.value.offset == 12


def test_bad_magic_rejected():
    with pytest.raises(BadMagicError):
        DataService.decode_tensor(b'XXXX' + DataService.encode_tensor(Image(np.ones(2)))[4:])
    with pytest.raises(BadMagicError):
        DataService.decode_tensor(b'MF')


def test_unsupported_role_rejected():
    data = container({'version': 1, 'role': 'volume', 'ndim': 1, 'dims': [1], 'dtype': '<f8'}, b'\0' * 8)
    with pytest.raises(UnsupportedRoleError):
        DataService.decode_tensor(data)


def test_missing_version_and_trailing_bytes_rejected():
    with pytest.raises(TensorParseError):
        DataService.decode_tensor(container({'role': 'image', 'dims': [1], 'dtype': '<f8'}, b'\0' * 8))
    with pytest.raises(TensorParseError):
        DataService.decode_tensor(DataService.encode_tensor(Image(np.ones(2))) + b'\0')


def test_pgm_decoding_8_and_16_bit():
    img = DataService.decode_pgm(b"P5\n# made by hand\n2 1\n255\n" + bytes([255, 0]))
    assert img.dims == (1, 2)
    assert img.data.tolist() == [[1.0, 0.0]]

    wide = DataService.decode_pgm(b"P5 1 2 65535\n" + struct.pack('>HH', 65535, 0))
    assert wide.data.tolist() == [[1.0], [0.0]]


def test_pgm_round_trip_within_quantization(rng):
    img = Image(rng.random((5, 4)))
    for bits, levels in ((8, 255), (16, 65535)):
        decoded = DataService.load_tensor(io.BytesIO(DataService.encode_pgm(img, bits)))
        np.testing.assert_allclose(decoded.data, img.data, atol=0.5 / levels + 1e-12)


def test_pgm_truncated_and_invalid():
    with pytest.raises(TruncatedPayloadError):
        DataService.decode_pgm(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(TensorParseError):
        DataService.decode_pgm(b"P5\n4 x\n255\n" + bytes(16))
    with pytest.raises(ValueError):
        DataService.encode_pgm(Image(np.zeros((2, 2, 2))))


def test_load_image_rejects_other_roles(tmp_path):
    path = DataService.save_tensor(DisplacementField.zeros((2, 2)), tmp_path / "field.mft")
    with pytest.raises(UnsupportedRoleError):
        DataService.load_image(path)


def test_checkpoint_round_trip(tmp_path, small_config):
    params = randomized_params(small_config, seed=3)
    path = DataService.save_checkpoint(params, tmp_path / "net.mfc", metadata={'steps': 12})
    loaded = DataService.load_checkpoint(path)
    assert loaded.config == params.config
    for name, value in params.tensors.items():
        assert np.array_equal(loaded.tensors[name], value)
    _, metadata = DataService.decode_checkpoint(path.read_bytes())
    assert metadata == {'steps': 12}


def test_checkpoint_errors(small_config):
    data = DataService.encode_checkpoint(randomized_params(small_config, seed=3))
    with pytest.raises(TruncatedPayloadError):
        DataService.decode_checkpoint(data[:-10])
    with pytest.raises(BadMagicError):
        DataService.decode_checkpoint(DataService.encode_tensor(Image(np.ones(2))))


def repack_checkpoint(data, edit):
    length = struct.unpack('<I', data[4:8])[0]
    header = json.loads(data[8:8 + length])
    edit(header)
    encoded = json.dumps(header).encode('utf-8')
    return b'MFC1' + struct.pack('<I', len(encoded)) + encoded + data[8 + length:]


@pytest.mark.parametrize("key", ['name', 'offset', 'nbytes', 'shape', 'dtype'])
def test_checkpoint_entry_missing_key_is_parse_error(small_config, key):
    data = DataService.encode_checkpoint(randomized_params(small_config, seed=3))
    broken = repack_checkpoint(data, lambda header: header['tensors'][0].pop(key))
    with pytest.raises(TensorParseError, match="entry 0"):
        DataService.decode_checkpoint(broken)


def test_checkpoint_entry_with_wrong_shape_is_parse_error(small_config):
    data = DataService.encode_checkpoint(randomized_params(small_config, seed=3))

    def grow(header):
        header['tensors'][0]['shape'][0] += 1

    with pytest.raises(TensorParseError):
        DataService.decode_checkpoint(repack_checkpoint(data, grow))
    with pytest.raises(TensorParseError):
        DataService.decode_checkpoint(repack_checkpoint(data, lambda header: header.update(tensors=[1, 2])))


@pytest.mark.parametrize("role,dims,values", [
    ('image', [2], [np.nan, 1.0]),
    ('image', [2], [0.5, np.inf]),
    ('field', [2], [0.0, -np.inf]),
])
def test_non_finite_payload_is_parse_error(role, dims, values):
    payload = np.asarray(values, dtype='<f8').tobytes()
    data = container({'version': 1, 'role': role, 'ndim': 1, 'dims': dims, 'dtype': '<f8'}, payload)
    with pytest.raises(TensorParseError, match=f"Invalid {role} payload"):
        DataService.decode_tensor(data)


def test_scale_checkpoint_path(tmp_path):
    assert DataService.scale_checkpoint_path(tmp_path / "checkpoint.mfc", 2).name == "checkpoint.scale2.mfc"


def test_csv_and_manifest_round_trip(tmp_path):
    df = pd.DataFrame({'step': [0, 1], 'total': [-0.5, -0.75]})
    loaded = DataService.load_csv(DataService.save_csv(df, tmp_path / "out" / "trace.csv"))
    pd.testing.assert_frame_equal(loaded, df)
    manifest = {'seed': 3, 'outputs': ['a', 'b']}
    assert DataService.load_manifest(DataService.save_manifest(manifest, tmp_path / "manifest.json")) == manifest


def test_load_csv_wraps_errors(tmp_path):
    with pytest.raises(ValueError):
        DataService.load_csv(tmp_path / "missing.csv")


def test_load_atlases(tmp_path, rng):
    DataService.save_tensor(Image(rng.random((4, 4))), tmp_path / "a.mft")
    DataService.save_tensor(LabelMap(np.ones((4, 4), dtype=int)), tmp_path / "a.labels.mft")
    DataService.save_pgm(Image(rng.random((4, 4))), tmp_path / "b.pgm")
    DataService.save_tensor(LabelMap(np.zeros((4, 4), dtype=int)), tmp_path / "b.labels.mft")
    DataService.save_tensor(Image(rng.random((4, 4))), tmp_path / "unlabeled.mft")
    names, images, labels = DataService.load_atlases(tmp_path)
    assert names == ['a', 'b']
    assert all(img.dims == (4, 4) for img in images)
    assert labels[0].labels.sum() == 16
    with pytest.raises(FileNotFoundError):
        DataService.load_atlases(tmp_path / "nowhere")


def test_load_run_directory(tmp_path, rng):
    DataService.save_manifest({'exit_status': 0}, tmp_path / "manifest.json")
    DataService.save_csv(pd.DataFrame({'step': [0], 'total': [-1.0]}), tmp_path / "loss_trace.csv")
    DataService.save_tensor(DisplacementField.zeros((4, 4)), tmp_path / "field.mft")
    DataService.save_tensor(Image(rng.random((4, 4))), tmp_path / "warped.mft")
    DataService.save_tensor(LabelMap(np.zeros((4, 4), dtype=int)), tmp_path / "labels.mft")
    run = DataService.load_run_directory(tmp_path)
    assert run['manifest'] == {'exit_status': 0}
    assert len(run['trace']) == 1
    assert run['metrics'] is None
    assert list(run['fields']) == ['field.mft']
    assert list(run['images']) == ['warped.mft']
    assert list(run['labels']) == ['labels.mft']
