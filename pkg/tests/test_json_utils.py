# -*- coding: utf-8 -*-
"""JSON 저장 / 블롭 / 출처 기록 테스트"""

import json

import numpy as np
import pytest

from core.errors import DataError
from utils.json_utils import JSONUtils


def test_save_json_writes_numpy_values_with_trailing_newline(tmp_path):
    target = tmp_path / 'nested' / 'meta.json'

    assert JSONUtils.save_json({'a': np.int64(3), 'b': np.arange(2)}, target, sort_keys=True) == target

    text = target.read_text(encoding='utf-8')
    assert text.endswith('}\n')
    assert json.loads(text) == {'a': 3, 'b': [0, 1]}
    assert list(target.parent.iterdir()) == [target]


def test_save_json_unserializable_raises_and_leaves_no_file(tmp_path):
    target = tmp_path / 'meta.json'

    with pytest.raises(DataError):
        JSONUtils.save_json({'a': 1, 'b': object()}, target)

    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_save_json_failure_keeps_previous_contents(tmp_path):
    target = tmp_path / 'meta.json'
    JSONUtils.save_json({'version': 1}, target)

    with pytest.raises(DataError):
        JSONUtils.save_json({'version': 2, 'bad': {1, 2}}, target)

    assert json.loads(target.read_text(encoding='utf-8')) == {'version': 1}


def test_save_json_write_error_is_data_error(tmp_path):
    blocker = tmp_path / 'blocker'
    blocker.write_text('file, not a directory', encoding='utf-8')

    with pytest.raises(DataError):
        JSONUtils.save_json({'a': 1}, blocker / 'meta.json')


def test_blob_preserves_arrays_and_rejects_truncation(tmp_path):
    target = tmp_path / 'weights.bin'
    arrays = [np.arange(6, dtype=np.float64).reshape(2, 3), np.array([0.1, -2.5])]

    JSONUtils.save_blob({'name': 'test'}, arrays, target)
    header, loaded = JSONUtils.load_blob(target)

    assert header['shapes'] == [[2, 3], [2]]
    assert all(np.array_equal(a, b) for a, b in zip(arrays, loaded))
    target.write_bytes(target.read_bytes()[:-8])
    with pytest.raises(DataError):
        JSONUtils.load_blob(target)


def test_provenance_has_no_timestamp_and_hashes_inputs(tmp_path):
    source = tmp_path / 'input.txt'
    source.write_text('x', encoding='utf-8')
    artifact = tmp_path / 'out.csv'
    artifact.write_text('y', encoding='utf-8')

    path = JSONUtils.write_provenance(artifact, 'features', [source], 'abc', 7, '1.0.0', root=tmp_path)

    record = json.loads(path.read_text(encoding='utf-8'))
    assert path.name == 'out.csv.provenance.json'
    assert set(record) == {'artifact', 'stage', 'inputs', 'config_hash', 'seed', 'tool_version'}
    assert record['inputs']['input.txt'] is not None
