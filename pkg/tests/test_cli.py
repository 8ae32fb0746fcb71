import json
import math
import os
import urllib.error
import urllib.request

import pytest

from geonorm.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cli
from geonorm.results import load_loss_log
from geonorm.training import BUNDLED_CORPUS, CORPUS_FILENAME


@pytest.fixture
def small_run(text_corpus):
    def args(out_dir, *extra):
        return [
            '--dim', '16', '--heads', '2', '--layers', '1', '--seq', '8', '--steps', '3', '--batch', '2',
            '--eval_every', '2', '--eval_batches', '1', '--corpus', text_corpus, '--out', str(out_dir), '-v', '0',
            *extra
        ]
    return args


def read(path) -> str:
    with open(path, encoding='utf-8') as f:
        return f.read()


def test_train_writes_run_files(tmp_path, small_run):
    out = tmp_path / 'out'
    assert cli(['train', *small_run(out, '--seed', '5')]) == EXIT_OK
    assert sorted(os.listdir(out)) == ['loss_geonorm_5.csv', 'run_geonorm_5.json', 'weights_geonorm_5.npz']
    log = load_loss_log(str(out / 'loss_geonorm_5.csv'))
    assert log.steps('train') == [1, 2, 3]
    assert log.steps('val') == [0, 2, 3]
    manifest = json.loads(read(out / 'run_geonorm_5.json'))
    assert manifest['model']['dim'] == 16
    assert manifest['model']['strategy']['name'] == 'geonorm'
    assert manifest['train']['seed'] == 5
    assert manifest['final']['failed'] is False


def test_train_is_deterministic(tmp_path, small_run):
    for name in ('a', 'b'):
        assert cli(['train', '--strategy', 'prenorm', *small_run(tmp_path / name, '--seed', '3')]) == EXIT_OK
    assert read(tmp_path / 'a' / 'loss_prenorm_3.csv') == read(tmp_path / 'b' / 'loss_prenorm_3.csv')


def test_train_seed_from_environment(tmp_path, small_run, monkeypatch):
    monkeypatch.setenv('GEONORM_SEED', '42')
    assert cli(['train', *small_run(tmp_path)]) == EXIT_OK
    assert os.path.isfile(tmp_path / 'loss_geonorm_42.csv')


def test_geo_options_on_other_strategy_is_a_usage_error(tmp_path, small_run):
    with pytest.raises(SystemExit) as info:
        cli(['train', '--strategy', 'prenorm', '--decay', 'harmonic', *small_run(tmp_path)])
    assert info.value.code == EXIT_USAGE


def test_missing_corpus_is_a_usage_error(tmp_path, small_run):
    args = small_run(tmp_path)
    args[args.index('--corpus') + 1] = str(tmp_path / 'missing.txt')
    with pytest.raises(SystemExit) as info:
        cli(['train', *args])
    assert info.value.code == EXIT_USAGE


def test_unknown_option_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        cli(['train', '--strategy', 'layernorm'])
    assert info.value.code == EXIT_USAGE


def test_config_file_precedence(tmp_path, small_run):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'steps': 4, 'dim': 8, 'strategy': 'postnorm', 'seed': 9}))
    out = tmp_path / 'out'
    assert cli(['train', '--config', str(config), *small_run(out)]) == EXIT_OK
    manifest = json.loads(read(out / 'run_postnorm_9.json'))
    # --steps and --dim given on the command line win over the file
    assert manifest['train']['steps'] == 3
    assert manifest['model']['dim'] == 16


def test_config_file_unknown_key(tmp_path, small_run):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'learning_rate': 0.1}))
    with pytest.raises(SystemExit) as info:
        cli(['train', '--config', str(config), *small_run(tmp_path)])
    assert info.value.code == EXIT_USAGE


def test_compare_summary(tmp_path, small_run):
    code = cli(['compare', '--strategies', 'geonorm,prenorm', '--seeds', '1,2', *small_run(tmp_path)])
    assert code == EXIT_OK
    for strategy in ('geonorm', 'prenorm'):
        for seed in (1, 2):
            assert os.path.isfile(tmp_path / f'loss_{strategy}_{seed}.csv')
    lines = read(tmp_path / 'summary.csv').splitlines()
    assert lines[0].startswith('strategy,runs,failed,final_val_mean,final_val_std,val_0_mean')
    assert [line.split(',')[:3] for line in lines[1:]] == [['geonorm', '2', '0'], ['prenorm', '2', '0']]


def test_compare_jobs_do_not_change_results(tmp_path, small_run):
    base = ['compare', '--strategies', 'geonorm,deepnorm', '--seeds', '0,1']
    assert cli([*base, *small_run(tmp_path / 'serial')]) == EXIT_OK
    assert cli([*base, '--jobs', '2', *small_run(tmp_path / 'parallel')]) == EXIT_OK
    assert read(tmp_path / 'serial' / 'summary.csv') == read(tmp_path / 'parallel' / 'summary.csv')
    assert read(tmp_path / 'serial' / 'loss_deepnorm_1.csv') == read(tmp_path / 'parallel' / 'loss_deepnorm_1.csv')


def test_compare_needs_two_strategies(tmp_path, small_run):
    with pytest.raises(SystemExit) as info:
        cli(['compare', '--strategies', 'geonorm,geonorm', *small_run(tmp_path)])
    assert info.value.code == EXIT_USAGE


def test_ablate_clamp(tmp_path, small_run):
    code = cli(['ablate-clamp', '--seeds', '0', *small_run(tmp_path)])
    # three steps are far too few to converge
    assert code == EXIT_FAILURE
    lines = read(tmp_path / 'clamp_summary.csv').splitlines()
    assert lines[0] == 'clamp,seed,initial_val,final_train,final_val,failed,converged'
    assert [line.split(',')[0] for line in lines[1:]] == ['pi/2', 'pi/4', 'pi/8']
    assert all(line.endswith(',false,false') for line in lines[1:])
    for label in ('pi_2', 'pi_4', 'pi_8'):
        assert os.path.isfile(tmp_path / f'clamp_{label}' / 'loss_geonorm_0.csv')
    manifest = json.loads(read(tmp_path / 'clamp_pi_8' / 'run_geonorm_0.json'))
    assert manifest['model']['strategy']['clamp'] == pytest.approx(0.39269908169872414)


def test_ablate_decay(tmp_path, small_run):
    cli(['ablate-decay', '--seeds', '0', *small_run(tmp_path)])
    lines = read(tmp_path / 'decay_summary.csv').splitlines()
    assert [line.split(',')[0] for line in lines[1:]] == ['harmonic', 'sqrt', 'linear']


def test_equivalence_command(tmp_path):
    code = cli(['equivalence', '--layers', '3', '--dim', '16', '--heads', '2', '--seq', '4', '--out', str(tmp_path),
                '-v', '0'])
    assert code == EXIT_OK
    report = json.loads(read(tmp_path / 'equivalence.json'))
    assert report['passed'] is True
    assert len(report['deviations']) == 6
    assert not os.path.exists(tmp_path / 'failed_equivalence.json')


def test_equivalence_failure_writes_replay_file(tmp_path):
    with pytest.warns(UserWarning):
        code = cli(['equivalence', '--layers', '2', '--dim', '8', '--heads', '2', '--seq', '4',
                    '--tolerance', '0', '--out', str(tmp_path), '-v', '0'])
    assert code == EXIT_FAILURE
    failure = json.loads(read(tmp_path / 'failed_equivalence.json'))
    assert failure['suite'] == 'equivalence' and failure['layers'] == 2


def test_geometry_check_command(tmp_path):
    assert cli(['geometry-check', '--trials', '200', '--seed', '0', '--out', str(tmp_path), '-v', '0']) == EXIT_OK
    report = json.loads(read(tmp_path / 'geometry.json'))
    assert report['trials'] == 200 and report['passed'] is True


def test_gradcheck_command(tmp_path):
    assert cli(['gradcheck', '--samples', '2', '--seed', '0', '--out', str(tmp_path), '-v', '0']) == EXIT_OK
    report = json.loads(read(tmp_path / 'gradcheck.json'))
    assert report['passed'] is True
    assert 'block[geonorm]' in [r['name'] for r in report['results']]


def test_debug_prints_calls(tmp_path, capsys):
    cli(['equivalence', '--layers', '1', '--dim', '8', '--heads', '2', '--seq', '4', '--out', str(tmp_path),
         '-v', '0', '--debug'])
    assert 'check_equivalence(' in capsys.readouterr().out


@pytest.mark.slow
def test_compare_five_strategies_at_default_scale(tmp_path, default_corpus):
    strategies = ['postnorm', 'prenorm', 'deepnorm', 'sandwichnorm', 'geonorm']
    code = cli(['compare', '--strategies', ','.join(strategies), '--seeds', '0,1,2', '--jobs', '3',
                '--corpus', default_corpus, '--out', str(tmp_path), '-v', '0'])
    assert code == EXIT_OK
    rows = [line.split(',') for line in read(tmp_path / 'summary.csv').splitlines()[1:]]
    assert [row[:3] for row in rows] == [[s, '3', '0'] for s in strategies]
    assert all(row[3] for row in rows)
    for strategy in strategies:
        for seed in (0, 1, 2):
            final = json.loads(read(tmp_path / f'run_{strategy}_{seed}.json'))['final']
            assert final['failed'] is False
            assert final['train_loss'] < 0.7 * math.log(256)


@pytest.mark.slow
def test_ablate_clamp_converges_at_default_scale(tmp_path, default_corpus):
    code = cli(['ablate-clamp', '--seeds', '0', '--corpus', default_corpus, '--out', str(tmp_path), '-v', '0'])
    assert code == EXIT_OK
    lines = read(tmp_path / 'clamp_summary.csv').splitlines()
    assert [line.split(',')[0] for line in lines[1:]] == ['pi/2', 'pi/4', 'pi/8']
    for line in lines[1:]:
        _, _, initial_val, _, final_val, failed, converged = line.split(',')
        assert (failed, converged) == ('false', 'true')
        assert float(final_val) <= 0.7 * float(initial_val)


def small_run_without_corpus(small_run, out_dir, *extra):
    args = small_run(out_dir, *extra)
    i = args.index('--corpus')
    return args[:i] + args[i + 2:]


def test_train_uses_cached_default_corpus(tmp_path, small_run, text_corpus):
    cache = tmp_path / 'cache'
    cache.mkdir()
    (cache / CORPUS_FILENAME).write_bytes(read(text_corpus).encode('utf-8'))
    args = small_run_without_corpus(small_run, tmp_path / 'out', '--seed', '0', '--download_root', str(cache))
    assert cli(['train', *args]) == EXIT_OK
    manifest = json.loads(read(tmp_path / 'out' / 'run_geonorm_0.json'))
    assert manifest['corpus'] == os.path.abspath(cache / CORPUS_FILENAME)


def test_train_falls_back_to_bundled_corpus_offline(tmp_path, small_run, monkeypatch):
    def offline(url, timeout=None):
        raise urllib.error.URLError('no route to host')

    monkeypatch.setattr(urllib.request, 'urlopen', offline)
    args = small_run_without_corpus(small_run, tmp_path / 'out', '--seed', '0', '--download_root', str(tmp_path))
    with pytest.warns(UserWarning, match='bundled sample corpus'):
        assert cli(['train', *args]) == EXIT_OK
    manifest = json.loads(read(tmp_path / 'out' / 'run_geonorm_0.json'))
    assert manifest['corpus'] == os.path.abspath(BUNDLED_CORPUS)
