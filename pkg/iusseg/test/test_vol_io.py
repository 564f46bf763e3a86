import os

import numpy as np
import pytest

from iusseg.volume.vol import Volume3D
from iusseg.volume.vol_io import VolumeIOError, load_volume, save_volume, format_number, read_header


def write(path, text):
    with open(path, 'w') as fw:
        fw.write(text)


HEADER = """ObjectType = Image
NDims = 3
DimSize = 2 2 2
ElementSpacing = 0.5 0.5 0.5
ElementType = %s
ElementDataFile = v.raw
"""


def test_save_and_load_are_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    a = np.radians(30.0)
    direction = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    vol = Volume3D(rng.random((3, 4, 5), dtype=np.float32), (0.1, 0.3, 1 / 3), (-1.25, 0.0, 7.1), direction,
                   {'Modality': 'MET_MOD_US'})
    path = str(tmp_path / 'v.mhd')
    save_volume(vol, path)
    assert os.path.isfile(str(tmp_path / 'v.raw'))
    assert load_volume(path).equals(vol)


def test_labels_keep_uint8(tmp_path):
    vol = Volume3D(np.arange(8, dtype=np.uint8).reshape(2, 2, 2), (1, 1, 1))
    path = str(tmp_path / 'labels')
    save_volume(vol, path)
    loaded = load_volume(path + '.mhd')
    assert loaded.is_label
    assert np.array_equal(loaded.data, vol.data)


def test_header_order_and_unknown_keys(tmp_path):
    write(str(tmp_path / 'v.mhd'), HEADER % 'MET_UCHAR' + 'AnatomicalOrientation = RAI\n')
    np.zeros(8, dtype=np.uint8).tofile(str(tmp_path / 'v.raw'))
    vol = load_volume(str(tmp_path / 'v.mhd'))
    assert vol.extra_header == {'AnatomicalOrientation': 'RAI'}
    save_volume(vol, str(tmp_path / 'w.mhd'))
    header = read_header(str(tmp_path / 'w.mhd'))
    assert header['AnatomicalOrientation'] == 'RAI'
    assert list(header)[-1] == 'ElementDataFile'


def test_missing_file(tmp_path):
    with pytest.raises(VolumeIOError) as e:
        load_volume(str(tmp_path / 'nope.mhd'))
    assert e.value.reason == 'missing file'
    assert str(e.value).endswith('nope.mhd')


def test_missing_raw(tmp_path):
    write(str(tmp_path / 'v.mhd'), HEADER % 'MET_UCHAR')
    with pytest.raises(VolumeIOError) as e:
        load_volume(str(tmp_path / 'v.mhd'))
    assert e.value.path.endswith('v.raw')


def test_unsupported_element_type(tmp_path):
    write(str(tmp_path / 'v.mhd'), HEADER % 'MET_SHORT')
    np.zeros(8, dtype=np.int16).tofile(str(tmp_path / 'v.raw'))
    with pytest.raises(VolumeIOError, match='ElementType'):
        load_volume(str(tmp_path / 'v.mhd'))


def test_data_length_mismatch(tmp_path):
    write(str(tmp_path / 'v.mhd'), HEADER % 'MET_FLOAT')
    np.zeros(7, dtype='<f4').tofile(str(tmp_path / 'v.raw'))
    with pytest.raises(VolumeIOError, match='data-length mismatch'):
        load_volume(str(tmp_path / 'v.mhd'))


def test_non_finite_spacing(tmp_path):
    write(str(tmp_path / 'v.mhd'), (HEADER % 'MET_UCHAR').replace('0.5 0.5 0.5', '0.5 nan 0.5'))
    np.zeros(8, dtype=np.uint8).tofile(str(tmp_path / 'v.raw'))
    with pytest.raises(VolumeIOError, match='spacing'):
        load_volume(str(tmp_path / 'v.mhd'))


@pytest.mark.parametrize('x,text', [(1.0, '1'), (-3.0, '-3'), (0.1, '0.1'), (1 / 3, repr(1 / 3))])
def test_format_number(x, text):
    assert format_number(x) == text
    assert float(format_number(x)) == x
