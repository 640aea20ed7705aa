import json

import pytest

from funknn.model import FunkNN
from synth_data.generators import ellipse_phantom
from synth_data.image_io import load_png, save_png


def _payload(result):
    """stdout holds exactly one line: the JSON summary. Logs go to stderr."""
    assert result.exit_code == 0, result.output
    lines = result.stdout.strip().splitlines()
    assert len(lines) == 1, result.stdout
    return json.loads(lines[0])


@pytest.fixture
def tiny_run_config(tmp_path):
    """Run config that keeps every stage to a handful of cheap steps."""
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps({
        'data': {'n': 64, 'count': 4, 'test_count': 1},
        'funknn': {'mode': 'single', 'd': 32, 'steps': 2, 'pixels_per_batch': 8, 'images_per_batch': 2,
                   'eval_chunk': 256},
        'prior': {'latent_dim': 4, 'base_channels': 2, 'ae_steps': 2, 'ae_batch': 2, 'flow_blocks': 1,
                  'flow_hidden': [4], 'flow_steps': 2, 'flow_batch': 2},
        'solver': {'z_steps': 2, 'ct_steps': 2, 'finetune_steps': 1, 'coords_per_step': 32, 'log_every': 0},
        'radon': {'views': 6},
    }))
    return str(path)


@pytest.fixture
def checkpoints(tmp_path, tiny_prior):
    """A narrow FunkNN and a small prior saved the way the training commands save them."""
    funknn_dir = tmp_path / 'funknn'
    FunkNN(channels=1, p=5, width=4, seed=0).save(funknn_dir, mode='factor', s=2.0)
    prior_dir = tiny_prior.save(tmp_path / 'prior')
    return str(funknn_dir), str(prior_dir)


def test_gen_data_writes_dataset_and_config(app, runner, tmp_path):
    """gen-data leaves images, a manifest and the effective config."""
    out = tmp_path / 'data'
    result = runner.invoke(app, ['--seed', '3', 'gen-data', '--kind', 'phantom', '--n', '16', '--count', '4',
                                 '--test-count', '1', '--out', str(out)])
    payload = _payload(result)
    assert payload['success'] is True
    assert (payload['train'], payload['test']) == (3, 1)
    assert (out / 'manifest.json').is_file() and (out / 'images' / '00003.png').is_file()
    assert json.loads((out / 'config.json').read_text())['data']['kind'] == 'phantom'


def test_invalid_mode_is_a_usage_error(app, runner):
    """Choices are enforced by the command line itself."""
    result = runner.invoke(app, ['train', '--mode', 'sideways'])
    assert result.exit_code == 2


def test_train_then_superres(app, runner, tmp_path, tiny_run_config):
    """A two-step training run produces a checkpoint that super-resolves level by level."""
    data = tmp_path / 'data'
    _payload(runner.invoke(app, ['gen-data', '--config', tiny_run_config, '--out', str(data)]))
    trained = _payload(runner.invoke(app, ['train', '--config', tiny_run_config, '--data', str(data),
                                           '--out', str(tmp_path / 'train')]))
    assert trained['steps'] == 2
    assert (tmp_path / 'train' / 'loss_trace.csv').is_file()

    low = tmp_path / 'low.png'
    save_png(low, ellipse_phantom(seed=1, n=8))
    result = runner.invoke(app, ['superres', '--ckpt', str(tmp_path / 'train' / 'final'), '--input', str(low),
                                 '--levels', '2', '--config', tiny_run_config, '--out', str(tmp_path / 'sr')])
    assert _payload(result)['sizes'] == [16, 32]
    assert (tmp_path / 'sr' / 'level2_32.png').is_file()


def test_train_prior_then_sample(app, runner, tmp_path, tiny_run_config):
    """train-prior saves ae/ and flow/; sample draws from them."""
    data = tmp_path / 'data'
    _payload(runner.invoke(app, ['gen-data', '--config', tiny_run_config, '--out', str(data)]))
    prior_dir = tmp_path / 'prior'
    payload = _payload(runner.invoke(app, ['train-prior', '--config', tiny_run_config, '--data', str(data),
                                           '--out', str(prior_dir)]))
    assert payload['prior'] == str(prior_dir)
    assert (prior_dir / 'ae' / 'manifest.json').is_file() and (prior_dir / 'ae_metrics.csv').is_file()
    result = runner.invoke(app, ['sample', '--prior', str(prior_dir), '--count', '2', '--config', tiny_run_config,
                                 '--out', str(tmp_path / 'samples')])
    assert _payload(result)['count'] == 2
    assert load_png(tmp_path / 'samples' / 'samples.png').values.shape == (32, 65, 1)
    assert (tmp_path / 'samples' / 'sample_0001.bin').is_file()


def test_radon_and_fbp(app, runner, tmp_path):
    """radon stores a sinogram; fbp reconstructs it."""
    image = tmp_path / 'phantom.png'
    save_png(image, ellipse_phantom(seed=5, n=32))
    sino_dir = tmp_path / 'sino'
    payload = _payload(runner.invoke(app, ['radon', '--input', str(image), '--angles-range', '-70,70',
                                           '--views', '12', '--snr-db', 'inf', '--out', str(sino_dir)]))
    assert payload['views'] == 12 and payload['n_det'] == 46
    assert (sino_dir / 'header.json').is_file()
    result = runner.invoke(app, ['fbp', '--sino', str(sino_dir), '--window', 'ramlak', '--out', str(tmp_path / 'fbp')])
    assert _payload(result)['window'] == 'ramlak'
    assert (tmp_path / 'fbp' / 'fbp.png').is_file()


def test_validation_errors_exit_with_two(app, runner, tmp_path):
    """Library validation failures exit 2 with a JSON error on stderr."""
    image = tmp_path / 'phantom.png'
    save_png(image, ellipse_phantom(seed=5, n=16))
    result = runner.invoke(app, ['radon', '--input', str(image), '--angles-range', '70,-70',
                                 '--out', str(tmp_path / 'sino')])
    assert result.exit_code == 2
    error = json.loads(result.stderr.strip().splitlines()[-1])
    assert error['success'] is False and error['error'] == 'Validation Error'


def test_solve_gradient_problem(app, runner, tmp_path, tiny_run_config, checkpoints):
    """solve writes the reconstruction, its trace and a report with si-SNR."""
    funknn_dir, prior_dir = checkpoints
    spec = tmp_path / 'gaussian.json'
    spec.write_text(json.dumps({'x0': 0.1, 'y0': -0.1, 'sigma': 0.3}))
    out = tmp_path / 'solve'
    payload = _payload(runner.invoke(app, ['solve', '--problem', 'grad', '--prior', prior_dir, '--funknn', funknn_dir,
                                           '--observation', str(spec), '--config', tiny_run_config,
                                           '--out', str(out)]))
    assert 'si_snr' in payload['metrics']
    report = json.loads((out / 'report.json').read_text())
    assert report['config']['problem'] == 'grad'
    assert len(report['z']) == 6
    assert (out / 'reconstruction.png').is_file() and (out / 'trace.csv').is_file()


def test_solve_ct_projects_the_observation(app, runner, tmp_path, tiny_run_config, checkpoints):
    """Without --sino, the observation is projected and the FBP reference is scored."""
    funknn_dir, prior_dir = checkpoints
    image = tmp_path / 'phantom.png'
    save_png(image, ellipse_phantom(seed=5, n=64))
    out = tmp_path / 'ct'
    payload = _payload(runner.invoke(app, ['solve', '--problem', 'ct', '--prior', prior_dir, '--funknn', funknn_dir,
                                           '--observation', str(image), '--config', tiny_run_config,
                                           '--out', str(out)]))
    assert {'si_snr', 'fbp_si_snr'} <= set(payload['metrics'])
    assert (out / 'sinogram' / 'header.json').is_file()
    assert (out / 'fbp.png').is_file()
    assert json.loads((out / 'report.json').read_text())['fbp_warnings'] == []


def test_solve_needs_observations(app, runner, tmp_path, tiny_run_config, checkpoints):
    """Derivative problems without --observation are a validation error."""
    funknn_dir, prior_dir = checkpoints
    result = runner.invoke(app, ['solve', '--problem', 'sparse-grad', '--prior', prior_dir, '--funknn', funknn_dir,
                                 '--config', tiny_run_config, '--out', str(tmp_path / 'solve')])
    assert result.exit_code == 2


def test_single_view_fbp_records_a_warning(app, runner, tmp_path):
    """The single-view condition lands in the payload and report.json, not only in the log."""
    image = tmp_path / 'phantom.png'
    save_png(image, ellipse_phantom(seed=5, n=16))
    sino_dir = tmp_path / 'sino'
    _payload(runner.invoke(app, ['radon', '--input', str(image), '--angles-range', '0,10', '--views', '1',
                                 '--snr-db', 'inf', '--out', str(sino_dir)]))
    payload = _payload(runner.invoke(app, ['fbp', '--sino', str(sino_dir), '--out', str(tmp_path / 'fbp')]))
    assert payload['warnings'] == ['single_view: the result is only a smeared back-projection']
    report = json.loads((tmp_path / 'fbp' / 'report.json').read_text())
    assert report['warnings'] == payload['warnings'] and report['views'] == 1
