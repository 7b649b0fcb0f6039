import json

import numpy as np
import pandas as pd
import pytest

import utils
from core_model import UsageError
from trainer import CURVE_COLUMNS


def write_curves(run_dir, offset=0.0, epochs=3):
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = [{'stage': 'burn_in' if e <= 2 else 'mutual', 'epoch': e, 'loss_sup': 1.0, 'loss_semi': 0.0,
             'loss_weak': 0.0, 'loss_total': 1.0, 'map_theta': 0.1 * e + offset,
             'map_iter': 0.1 * e + offset, 'map_epoch': 0.1 * e + offset} for e in range(1, epochs + 1)]
    pd.DataFrame(rows, columns=CURVE_COLUMNS).to_csv(run_dir / 'curves.csv', index=False)
    return run_dir


def test_load_config_formats(tmp_path):
    (tmp_path / 'c.yaml').write_text('pseudo:\n  beta: 0.3\n')
    (tmp_path / 'c.json').write_text(json.dumps({'pseudo': {'beta': 0.4}}))
    (tmp_path / 'empty.yaml').write_text('')
    assert utils.load_config(tmp_path / 'c.yaml') == {'pseudo': {'beta': 0.3}}
    assert utils.load_config(tmp_path / 'c.json')['pseudo']['beta'] == 0.4
    assert utils.load_config(tmp_path / 'empty.yaml') == {}
    (tmp_path / 'c.toml').write_text('')
    with pytest.raises(UsageError):
        utils.load_config(tmp_path / 'c.toml')
    with pytest.raises(FileNotFoundError):
        utils.load_config(tmp_path / 'missing.yaml')


def test_save_results_handles_numpy(tmp_path):
    path = tmp_path / 'out' / 'result.json'
    utils.save_results({'map': np.float64(0.5), 'n': np.int64(3), 'curve': np.array([0.1, 0.2])}, path)
    assert json.loads(path.read_text()) == {'map': 0.5, 'n': 3, 'curve': [0.1, 0.2]}


def test_confidence_band(tmp_path):
    curves = utils.load_curves([write_curves(tmp_path / 'a'), write_curves(tmp_path / 'b', offset=0.2)])
    assert set(curves['run']) == {str(tmp_path / 'a'), str(tmp_path / 'b')}
    band = utils.confidence_band(curves, 'map_epoch')
    assert band['mean'].tolist() == pytest.approx([0.2, 0.3, 0.4])
    assert band['half_width'].tolist() == pytest.approx([1.96 * np.sqrt(0.02) / np.sqrt(2)] * 3)


def test_single_run_has_no_band(tmp_path):
    band = utils.confidence_band(utils.load_curves([write_curves(tmp_path / 'a')]), 'map_iter')
    assert (band['half_width'] == 0.0).all()


def test_load_curves_errors(tmp_path):
    with pytest.raises(UsageError):
        utils.load_curves([])
    with pytest.raises(FileNotFoundError):
        utils.load_curves([tmp_path / 'nothing'])
    empty = tmp_path / 'empty'
    empty.mkdir()
    pd.DataFrame(columns=CURVE_COLUMNS).to_csv(empty / 'curves.csv', index=False)
    with pytest.raises(UsageError):
        utils.load_curves([empty])
    blank = tmp_path / 'blank'
    blank.mkdir()
    (blank / 'curves.csv').write_bytes(b'')
    with pytest.raises(UsageError):
        utils.load_curves([blank])


def test_plots_are_written(tmp_path):
    curves = utils.load_curves([write_curves(tmp_path / 'a'), write_curves(tmp_path / 'b', offset=0.1)])
    utils.plot_learning_curves(curves, tmp_path / 'curves.png')
    assert (tmp_path / 'curves.png').stat().st_size > 0

    ablation = pd.DataFrame({'group': ['fraction', 'fraction', 'threshold'], 'label_fraction': [1.0, 0.0, 1.0],
                             'test_mean': [0.5, 0.3, 0.4], 'test_std': [0.05, 0.02, 0.01]})
    utils.plot_fraction_curve(ablation, tmp_path / 'fraction.png')
    assert (tmp_path / 'fraction.png').exists()
    with pytest.raises(UsageError):
        utils.plot_fraction_curve(ablation[ablation['group'] == 'threshold'])


def test_format_map():
    assert utils.format_map({'mean': 0.51234, 'std': 0.01}) == '0.5123 ± 0.0100'
    assert utils.format_map({'mean': float('nan'), 'std': float('nan')}) == 'N/A'
