"""
Reading and writing of Volume3D instances as MetaImage files: a text header
(.mhd) next to a raw little-endian voxel file (.raw).

Supported header keys: ObjectType (Image), NDims (3), DimSize, ElementSpacing,
Offset, TransformMatrix (9 values, row-major), ElementType (MET_FLOAT or
MET_UCHAR) and ElementDataFile. Keys that are not interpreted are kept in
Volume3D.extra_header and written back on save.

Floats are written in their shortest round-trip form, so that
load_volume(save_volume(v)) reproduces v bit for bit.
"""

import os
from collections import OrderedDict
from typing import Dict

import numpy as np

from iusseg.volume.vol import Volume3D, InvalidVolume

ELEMENT_TYPES = {'MET_FLOAT': np.dtype('<f4'), 'MET_UCHAR': np.dtype('u1')}
KIND_TO_ELEMENT_TYPE = {'float32': 'MET_FLOAT', 'uint8': 'MET_UCHAR'}
# keys written by save_volume, in writing order; ElementDataFile is always last
KNOWN_KEYS = ['ObjectType', 'NDims', 'BinaryData', 'BinaryDataByteOrderMSB', 'CompressedData',
              'TransformMatrix', 'Offset', 'ElementSpacing', 'DimSize', 'ElementType',
              'ElementDataFile']


class VolumeIOError(Exception):
    """Exception class, instances of which are raised when a MetaImage file
    cannot be read or written.

    Attributes:
        path (str):   the header or raw file concerned
        reason (str): what went wrong
    """

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason

    def __str__(self):
        return '%s: %s' % (self.reason, self.path)


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def read_header(path: str) -> Dict[str, str]:
    """Parse a MetaImage header into an ordered key -> raw value mapping."""
    if not os.path.isfile(path):
        raise VolumeIOError(path, 'missing file')
    header = OrderedDict()
    with open(path, 'r') as fr:
        for line in fr:
            line = line.strip()
            if line == '' or '=' not in line:
                continue
            key, value = line.split('=', 1)
            header[key.strip()] = value.strip()
    return header


def _floats(path, header, key, n, default=None):
    if key not in header:
        if default is None:
            raise VolumeIOError(path, 'header lacks %s' % key)
        return np.array(default, dtype=np.float64)
    try:
        values = np.array([float(v) for v in header[key].split()], dtype=np.float64)
    except ValueError:
        raise VolumeIOError(path, 'unparsable %s' % key)
    if values.shape != (n,):
        raise VolumeIOError(path, '%s needs %d values' % (key, n))
    return values


def load_volume(path: str) -> Volume3D:
    """Read a MetaImage header and its raw file.

    Args:
        path (str): path of the .mhd header

    Raises:
        VolumeIOError: on a missing header or raw file, an unsupported
                       ElementType, a DimSize/data-length mismatch or a
                       non-finite spacing

    Returns:
        Volume3D: the volume, bit-identical to the file contents
    """
    header = read_header(path)
    if header.get('ObjectType', 'Image') != 'Image':
        raise VolumeIOError(path, 'unsupported ObjectType %s' % header.get('ObjectType'))
    if header.get('NDims', '3') != '3':
        raise VolumeIOError(path, 'unsupported NDims %s' % header.get('NDims'))
    if header.get('CompressedData', 'False') not in ('False', 'false'):
        raise VolumeIOError(path, 'compressed data is not supported')
    if header.get('BinaryDataByteOrderMSB', 'False') not in ('False', 'false'):
        raise VolumeIOError(path, 'big-endian data is not supported')
    element_type = header.get('ElementType')
    if element_type not in ELEMENT_TYPES:
        raise VolumeIOError(path, 'unsupported ElementType %s' % element_type)
    dims = _floats(path, header, 'DimSize', 3)
    if np.any(dims < 1) or np.any(dims != np.round(dims)):
        raise VolumeIOError(path, 'invalid DimSize %s' % header['DimSize'])
    dims = tuple(int(d) for d in dims)
    spacing = _floats(path, header, 'ElementSpacing', 3, default=(1.0, 1.0, 1.0))
    if not np.all(np.isfinite(spacing)):
        raise VolumeIOError(path, 'non-finite spacing')
    origin = _floats(path, header, 'Offset', 3, default=(0.0, 0.0, 0.0))
    matrix = _floats(path, header, 'TransformMatrix', 9, default=np.eye(3).ravel())
    if 'ElementDataFile' not in header:
        raise VolumeIOError(path, 'header lacks ElementDataFile')
    rawpath = os.path.join(os.path.dirname(os.path.abspath(path)), header['ElementDataFile'])
    if not os.path.isfile(rawpath):
        raise VolumeIOError(rawpath, 'missing file')
    raw = np.fromfile(rawpath, dtype=ELEMENT_TYPES[element_type])
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise VolumeIOError(rawpath, 'data-length mismatch (DimSize %s needs %d voxels, found %d)'
                            % (dims, dims[0] * dims[1] * dims[2], raw.size))
    data = raw.astype(raw.dtype.newbyteorder('=')).reshape(dims, order='F')
    extra = OrderedDict((k, v) for k, v in header.items() if k not in KNOWN_KEYS)
    try:
        return Volume3D(data, spacing, origin, matrix.reshape(3, 3), extra, copy=False)
    except InvalidVolume as e:
        raise VolumeIOError(path, e.reason)


def save_volume(vol: Volume3D, path: str) -> None:
    """Write a volume as '<name>.mhd' plus '<name>.raw' in the same directory.

    Raises:
        VolumeIOError: when the files cannot be written
    """
    base, ext = os.path.splitext(path)
    if ext.lower() != '.mhd':
        base = path
        path = path + '.mhd'
    rawname = os.path.basename(base) + '.raw'
    header = OrderedDict()
    header['ObjectType'] = 'Image'
    header['NDims'] = '3'
    header['BinaryData'] = 'True'
    header['BinaryDataByteOrderMSB'] = 'False'
    header['CompressedData'] = 'False'
    header['TransformMatrix'] = ' '.join(format_number(v) for v in vol.direction.ravel())
    header['Offset'] = ' '.join(format_number(v) for v in vol.origin)
    header['ElementSpacing'] = ' '.join(format_number(v) for v in vol.spacing)
    header['DimSize'] = ' '.join(str(d) for d in vol.dims)
    header['ElementType'] = KIND_TO_ELEMENT_TYPE[vol.element_kind]
    for key, value in vol.extra_header.items():
        header[key] = value
    header['ElementDataFile'] = rawname
    dtype = ELEMENT_TYPES[header['ElementType']]
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w') as fw:
            for key, value in header.items():
                fw.write('%s = %s\n' % (key, value))
        vol.data.astype(dtype).ravel(order='F').tofile(os.path.join(directory, rawname))
    except OSError as e:
        raise VolumeIOError(path, 'I/O failure (%s)' % e)
