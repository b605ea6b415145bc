"""
Data Service - Handles tensor, image, checkpoint, table and manifest files.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import FILES
from core.errors import BadMagicError, TensorParseError, TruncatedPayloadError, UnsupportedRoleError
from core.models import DisplacementField, Image, LabelMap, Mask, TensorRole
from core.regnet import NetConfig, NetParams

logger = logging.getLogger(__name__)

Tensor = Union[Image, DisplacementField, Mask, LabelMap]
PathOrFile = Union[str, os.PathLike, BinaryIO]

HEADER_LENGTH = struct.Struct('<I')
ROLE_DTYPES = {
    TensorRole.MASK: np.dtype('|u1'),
    TensorRole.LABELS: np.dtype('<i4'),
}


def _read_bytes(source: PathOrFile) -> bytes:
    if hasattr(source, 'read'):
        if hasattr(source, 'seek'):
            source.seek(0)
        return source.read()
    return Path(source).read_bytes()


def _pack(magic: bytes, header: Dict[str, Any], payload: bytes) -> bytes:
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    return magic + HEADER_LENGTH.pack(len(encoded)) + encoded + payload


def _unpack(data: bytes, magic: bytes) -> Tuple[Dict[str, Any], int]:
    """Split a container into its JSON header and the payload start offset"""
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise BadMagicError(f"Expected magic {magic!r}, found {data[:len(magic)]!r}")
    prefix_end = len(magic) + HEADER_LENGTH.size
    if len(data) < prefix_end:
        raise TruncatedPayloadError("File ends inside the header length field", offset=len(data))
    (header_length,) = HEADER_LENGTH.unpack_from(data, len(magic))
    header_end = prefix_end + header_length
    if len(data) < header_end:
        raise TruncatedPayloadError(
            f"File ends inside the {header_length}-byte header", offset=len(data)
        )
    try:
        header = json.loads(data[prefix_end:header_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorParseError(f"Malformed header: {str(e)}")
    if not isinstance(header, dict) or 'version' not in header:
        raise TensorParseError("Header is missing the format version")
    return header, header_end


def _write_bytes(data: bytes, path: Union[str, os.PathLike]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(data)
    return target


class DataService:
    """Service for reading and writing registration data."""

    @staticmethod
    def encode_tensor(tensor: Tensor) -> bytes:
        """
        Serialize an image, field, mask or label map as an MFT1 container.

        Args:
            tensor: Object to serialize

        Returns:
            Container bytes (magic, header length, JSON header, payload)
        """
        header: Dict[str, Any] = {'version': FILES['TENSOR_VERSION']}
        if isinstance(tensor, Image):
            role, array = TensorRole.IMAGE, tensor.data
        elif isinstance(tensor, DisplacementField):
            role, array = TensorRole.FIELD, tensor.vectors
            header['scale'] = tensor.scale
        elif isinstance(tensor, Mask):
            role, array = TensorRole.MASK, tensor.flags.astype(np.uint8)
        elif isinstance(tensor, LabelMap):
            role, array = TensorRole.LABELS, tensor.labels
            header['num_classes'] = tensor.num_classes
        else:
            raise TypeError(f"Cannot encode object of type {type(tensor).__name__}")

        dtype = ROLE_DTYPES.get(role, array.dtype.newbyteorder('<'))
        dims = list(tensor.dims)
        header.update({'role': role.value, 'ndim': len(dims), 'dims': dims, 'dtype': dtype.str})
        payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
        return _pack(FILES['TENSOR_MAGIC'], header, payload)

    @staticmethod
    def decode_tensor(data: bytes) -> Tensor:
        """
        Parse MFT1 container bytes into a typed object.

        Raises:
            BadMagicError, TruncatedPayloadError, UnsupportedRoleError,
            TensorParseError
        """
        header, offset = _unpack(data, FILES['TENSOR_MAGIC'])
        if header['version'] != FILES['TENSOR_VERSION']:
            raise TensorParseError(f"Unsupported tensor format version {header['version']}")
        try:
            role = TensorRole.from_string(str(header.get('role', '')))
        except ValueError:
            raise UnsupportedRoleError(f"Unsupported tensor role '{header.get('role')}'")
        try:
            dims = tuple(int(d) for d in header['dims'])
            dtype = np.dtype(header['dtype'])
        except (KeyError, TypeError, ValueError) as e:
            raise TensorParseError(f"Invalid tensor header: {str(e)}")
        if header.get('ndim', len(dims)) != len(dims):
            raise TensorParseError(f"Header ndim {header.get('ndim')} disagrees with dims {dims}")

        shape = dims + (len(dims),) if role == TensorRole.FIELD else dims
        expected = int(np.prod(shape)) * dtype.itemsize
        available = len(data) - offset
        if available < expected:
            raise TruncatedPayloadError(
                f"Payload holds {available} of {expected} bytes", offset=len(data)
            )
        if available > expected:
            raise TensorParseError(f"{available - expected} unexpected bytes after the payload")
        array = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        native = array.astype(dtype.newbyteorder('='))

        try:
            if role == TensorRole.IMAGE:
                return Image(native)
            if role == TensorRole.FIELD:
                return DisplacementField(native, scale=float(header.get('scale', 1.0)))
            if role == TensorRole.MASK:
                return Mask(native.astype(bool))
            return LabelMap(native, num_classes=header.get('num_classes'))
        except (TypeError, ValueError) as e:
            raise TensorParseError(f"Invalid {role.value} payload: {str(e)}")

    @staticmethod
    def save_tensor(tensor: Tensor, path: Union[str, os.PathLike]) -> Path:
        target = _write_bytes(DataService.encode_tensor(tensor), path)
        logger.info(f"Wrote {type(tensor).__name__} {tensor.dims} to {target}")
        return target

    @staticmethod
    def load_tensor(source: PathOrFile) -> Tensor:
        """
        Load a tensor container, or an 8/16-bit binary PGM as an Image in [0, 1].

        Args:
            source: Path or binary file-like object

        Returns:
            Image, DisplacementField, Mask or LabelMap per the header role
        """
        data = _read_bytes(source)
        if data[:2] == b'P5':
            return DataService.decode_pgm(data)
        tensor = DataService.decode_tensor(data)
        logger.debug(f"Loaded {type(tensor).__name__} with dims {tensor.dims}")
        return tensor

    @staticmethod
    def load_image(source: PathOrFile) -> Image:
        tensor = DataService.load_tensor(source)
        if not isinstance(tensor, Image):
            raise UnsupportedRoleError(f"Expected an image, found {type(tensor).__name__}")
        return tensor

    @staticmethod
    def decode_pgm(data: bytes) -> Image:
        """Binary PGM (P5) with max value up to 65535, mapped linearly to [0, 1]"""
        tokens: List[bytes] = []
        position = 2
        while len(tokens) < 3:
            if position >= len(data):
                raise TruncatedPayloadError("PGM header is incomplete", offset=len(data))
            char = data[position:position + 1]
            if char == b'#':
                end = data.find(b'\n', position)
                position = len(data) if end < 0 else end + 1
            elif char.isspace():
                position += 1
            else:
                start = position
                while position < len(data) and not data[position:position + 1].isspace():
                    position += 1
                tokens.append(data[start:position])
        position += 1
        try:
            width, height, max_value = (int(t) for t in tokens)
        except ValueError:
            raise TensorParseError(f"Malformed PGM header tokens {tokens}")
        if width < 1 or height < 1 or not (0 < max_value < 65536):
            raise TensorParseError(f"Invalid PGM geometry {width}x{height} max {max_value}")

        dtype = np.dtype('u1') if max_value < 256 else np.dtype('>u2')
        expected = width * height * dtype.itemsize
        if len(data) - position < expected:
            raise TruncatedPayloadError(
                f"PGM payload holds {len(data) - position} of {expected} bytes", offset=len(data)
            )
        pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=position)
        return Image(pixels.reshape(height, width).astype(np.float64) / max_value)

    @staticmethod
    def encode_pgm(img: Image, bits: int = 8) -> bytes:
        """Quantize a 2D image in [0, 1] to an 8 or 16-bit binary PGM"""
        if img.ndim != 2:
            raise ValueError(f"PGM holds 2D images only, got dims {img.dims}")
        if bits not in (8, 16):
            raise ValueError(f"PGM depth must be 8 or 16 bits, got {bits}")
        max_value = 255 if bits == 8 else 65535
        levels = np.rint(np.clip(img.data, 0.0, 1.0) * max_value)
        pixels = levels.astype(np.uint8 if bits == 8 else '>u2')
        height, width = img.dims
        return f"P5\n{width} {height}\n{max_value}\n".encode('ascii') + pixels.tobytes()

    @staticmethod
    def save_pgm(img: Image, path: Union[str, os.PathLike], bits: int = 8) -> Path:
        target = _write_bytes(DataService.encode_pgm(img, bits), path)
        logger.info(f"Wrote PGM {img.dims} to {target}")
        return target

    @staticmethod
    def encode_checkpoint(params: NetParams, metadata: Optional[Dict[str, Any]] = None) -> bytes:
        """Serialize NetParams with their config as an MFC1 container"""
        entries = []
        chunks = []
        offset = 0
        for name, tensor in params.tensors.items():
            array = np.ascontiguousarray(tensor, dtype=tensor.dtype.newbyteorder('<'))
            raw = array.tobytes()
            entries.append({
                'name': name,
                'shape': list(array.shape),
                'dtype': array.dtype.str,
                'offset': offset,
                'nbytes': len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
        header = {
            'version': FILES['CHECKPOINT_VERSION'],
            'config': params.config.to_dict(),
            'tensors': entries,
            'metadata': metadata or {},
        }
        return _pack(FILES['CHECKPOINT_MAGIC'], header, b''.join(chunks))

    @staticmethod
    def decode_checkpoint(data: bytes) -> Tuple[NetParams, Dict[str, Any]]:
        """
        Parse an MFC1 container.

        Returns:
            Tuple of (parameters, metadata)
        """
        header, start = _unpack(data, FILES['CHECKPOINT_MAGIC'])
        if header['version'] != FILES['CHECKPOINT_VERSION']:
            raise TensorParseError(f"Unsupported checkpoint version {header['version']}")
        try:
            config = NetConfig.from_dict(header['config'])
            entries = header['tensors']
        except (KeyError, TypeError, ValueError) as e:
            raise TensorParseError(f"Invalid checkpoint header: {str(e)}")
        tensors = {}
        for index, entry in enumerate(entries):
            try:
                name = str(entry['name'])
                begin = start + int(entry['offset'])
                end = begin + int(entry['nbytes'])
                dtype = np.dtype(entry['dtype'])
                shape = tuple(int(d) for d in entry['shape'])
            except (KeyError, TypeError, ValueError) as e:
                raise TensorParseError(f"Invalid checkpoint tensor entry {index}: {type(e).__name__} {str(e)}")
            if len(data) < end:
                raise TruncatedPayloadError(f"Checkpoint tensor '{name}' is cut short", offset=len(data))
            try:
                array = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape)
            except ValueError as e:
                raise TensorParseError(f"Checkpoint tensor '{name}' does not match its shape: {str(e)}")
            tensors[name] = array.astype(dtype.newbyteorder('='))
        try:
            params = NetParams(config, tensors)
        except ValueError as e:
            raise TensorParseError(f"Checkpoint tensors do not match their config: {str(e)}")
        return params, header.get('metadata', {})

    @staticmethod
    def save_checkpoint(
        params: NetParams,
        path: Union[str, os.PathLike],
        metadata: Optional[Dict[str, Any]] = None
    ) -> Path:
        target = _write_bytes(DataService.encode_checkpoint(params, metadata), path)
        logger.info(f"Wrote checkpoint with {params.num_parameters} parameters to {target}")
        return target

    @staticmethod
    def load_checkpoint(source: PathOrFile) -> NetParams:
        params, metadata = DataService.decode_checkpoint(_read_bytes(source))
        logger.info(f"Loaded checkpoint {params} (metadata keys: {sorted(metadata)})")
        return params

    @staticmethod
    def scale_checkpoint_path(path: Union[str, os.PathLike], index: int) -> Path:
        """Per-scale checkpoint name, e.g. checkpoint.mfc -> checkpoint.scale1.mfc"""
        base = Path(path)
        return base.with_name(f"{base.stem}.scale{index}{base.suffix}")

    @staticmethod
    def load_csv(file_obj) -> pd.DataFrame:
        """
        Load a table from a CSV path or file-like object.

        Args:
            file_obj: Path or file-like object containing CSV data

        Returns:
            DataFrame with loaded data
        """
        try:
            if hasattr(file_obj, 'seek'):
                file_obj.seek(0)
            df = pd.read_csv(file_obj)
            logger.info(f"Successfully loaded CSV with shape: {df.shape}")
            return df
        except Exception as e:
            logger.error(f"Error loading CSV: {str(e)}")
            raise ValueError(f"Unable to load CSV file: {str(e)}")

    @staticmethod
    def save_csv(df: pd.DataFrame, path: Union[str, os.PathLike]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(target, index=False, float_format='%.10g')
        logger.info(f"Wrote table {df.shape} to {target}")
        return target

    @staticmethod
    def save_manifest(manifest: Dict[str, Any], path: Union[str, os.PathLike]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
        return target

    @staticmethod
    def load_manifest(source: PathOrFile) -> Dict[str, Any]:
        text = _read_bytes(source).decode('utf-8')
        return json.loads(text)

    @staticmethod
    def load_atlases(directory: Union[str, os.PathLike]) -> Tuple[List[str], List[Image], List[LabelMap]]:
        """
        Load every atlas image in a directory with its label map.

        Images are `<name>.mft` or `<name>.pgm`; labels are `<name>.labels.mft`.

        Returns:
            Tuple of (names, images, label maps), sorted by name
        """
        root = Path(directory)
        if not root.is_dir():
            raise FileNotFoundError(f"Atlas directory {root} does not exist")
        names, images, labels = [], [], []
        for path in sorted(root.iterdir()):
            if path.name.endswith('.labels.mft') or path.suffix not in ('.mft', '.pgm'):
                continue
            label_path = root / f"{path.stem}.labels.mft"
            if not label_path.exists():
                logger.warning(f"Skipping atlas {path.name}: no label file {label_path.name}")
                continue
            label_map = DataService.load_tensor(label_path)
            if not isinstance(label_map, LabelMap):
                raise UnsupportedRoleError(f"{label_path.name} does not hold labels")
            names.append(path.stem)
            images.append(DataService.load_image(path))
            labels.append(label_map)
        logger.info(f"Loaded {len(names)} atlases from {root}")
        return names, images, labels

    @staticmethod
    def load_run_directory(directory: Union[str, os.PathLike]) -> Dict[str, Any]:
        """
        Collect the artifacts of one pipeline run.

        Returns:
            Dictionary with manifest, trace, metrics and benchmark tables
            (None when absent) and dicts of fields, images and label maps keyed
            by file name
        """
        root = Path(directory)
        if not root.is_dir():
            raise FileNotFoundError(f"Run directory {root} does not exist")
        run: Dict[str, Any] = {'manifest': None, 'trace': None, 'metrics': None, 'benchmark': None,
                               'fields': {}, 'images': {}, 'labels': {}}
        manifest_path = root / FILES['MANIFEST_FILE']
        if manifest_path.exists():
            run['manifest'] = DataService.load_manifest(manifest_path)
        for key, name in (('trace', 'TRACE_FILE'), ('metrics', 'METRICS_FILE'), ('benchmark', 'BENCHMARK_FILE')):
            path = root / FILES[name]
            if path.exists():
                run[key] = DataService.load_csv(path)
        for path in sorted(root.glob('*.mft')):
            tensor = DataService.load_tensor(path)
            if isinstance(tensor, DisplacementField):
                run['fields'][path.name] = tensor
            elif isinstance(tensor, Image):
                run['images'][path.name] = tensor
            elif isinstance(tensor, LabelMap):
                run['labels'][path.name] = tensor
        logger.info(
            f"Loaded run {root}: {len(run['fields'])} fields, {len(run['images'])} images, "
            f"{len(run['labels'])} label maps"
        )
        return run
