from csv import writer as csv_writer
from dataclasses import asdict, replace
from datetime import datetime, timezone
from hashlib import sha1
from logging import getLogger
from os import path
from sys import exit as sys_exit

import click
from decorator import decorator

from sparsevd import configure
from sparsevd.utils.config import parse_config, ConfigError, TrainConfig
from sparsevd.utils.datatext import (
        generate_dataset, load_task_data, DataError, Vocab)
from sparsevd.utils.file import (
        load_container, make_dir, write_manifest, write_text,
        ContainerError, SPLITS)
from sparsevd.utils.logs import (
        get_label, read_metrics, MetricsError, METRIC_FIELDS)
from sparsevd.utils.sparsity import (
        export_sparse, format_sparsity, load_sparse, SparsityError,
        EXPORT_KIND)
from sparsevd.utils.trainer import (
        evaluate, load_checkpoint, model_from_checkpoint, train,
        CheckpointError, DivergenceError)
from sparsevd.utils.varlayers import EmptySequenceError, TASKS
from sparsevd.utils.version import get_versions

OK = 0
CONFIG_ERROR = 2
DATA_ERROR = 3
DIVERGENCE = 4
CHECKPOINT_ERROR = 5
EXIT_CODES = (
        (ConfigError, CONFIG_ERROR),
        (DataError, DATA_ERROR),
        (EmptySequenceError, DATA_ERROR),
        (MetricsError, DATA_ERROR),
        (DivergenceError, DIVERGENCE),
        (CheckpointError, CHECKPOINT_ERROR),
        (ContainerError, CHECKPOINT_ERROR),
        (SparsityError, CHECKPOINT_ERROR))
QUALITY = {'charlm': 'bpc', 'sentiment': 'MSE'}
GENERATED_SIZES = {
        'sentiment': {'train': 2000, 'valid': 500, 'test': 500},
        'charlm': {'train': 200000, 'valid': 20000, 'test': 20000}}
CSV_FIELDS = ('label',) + METRIC_FIELDS[:-2]
EXPORT_FILE = 'sparse.npz'
MANIFEST_FILE = 'manifest.json'
CONFIG_FILE = 'config.cfg'


@decorator
def exit_on_error(f, *args, **kwargs):
    '''Maps known errors to exit codes'''
    logger = getLogger('sparsevd')

    try:
        return f(*args, **kwargs)
    except tuple(error for error, _ in EXIT_CODES) as e:
        for error, code in EXIT_CODES:
            if isinstance(e, error):
                break
        logger.debug('{} -> exit {}'.format(type(e).__name__, code))
        click.echo('error: {}'.format(e), err=True)
        sys_exit(code)


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def get_run_id(config_text, started):
    '''Git-style short hash of the config echo and start time'''
    text = '{}\n{}'.format(config_text, started)
    return sha1(text.encode()).hexdigest()[:7]


def load_model(filename):
    '''Returns (model, TrainConfig, symbols) from a checkpoint or export'''
    _, meta = load_container(filename)
    if meta.get('kind') == EXPORT_KIND:
        model = load_sparse(filename)
        config = replace(TrainConfig(), **meta['config'])
        return model, config, meta['vocab']
    checkpoint = load_checkpoint(filename)
    return (model_from_checkpoint(checkpoint), checkpoint.config,
            checkpoint.symbols)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging.')
def cli(verbose):
    '''Sparse variational dropout for LSTM models'''
    configure(verbose)


@cli.command(name='train')
@click.option('--config', 'config_file', type=click.Path(),
              help='KEY = value configuration file.')
@click.option('--seed', type=int, help='Overrides SEED.')
@click.option('--out', 'out_dir', required=True, type=click.Path(),
              help='Run directory.')
@click.option('--init-from', help='Overrides INIT_FROM.')
@click.argument('overrides', nargs=-1)
@exit_on_error
def cmd_train(config_file, seed, out_dir, init_from, overrides):
    '''Trains a model; writes checkpoint, metrics and manifest'''
    overrides = list(overrides)
    for option in overrides:
        if '=' not in option:
            raise ConfigError('expected key=value, got {!r}'.format(option))
    if seed is not None:
        overrides.append('SEED = {}'.format(seed))
    if init_from is not None:
        overrides.append("INIT_FROM = '{}'".format(init_from))
    config = parse_config(config_file, overrides)
    data = load_task_data(config)

    started = utc_now()
    make_dir(out_dir)
    config_echo = write_text(path.join(out_dir, CONFIG_FILE),
                             config.to_text())
    result = train(config, data, out_dir)

    manifest = {
        'runId': get_run_id(config.to_text(), started),
        'startedAt': started,
        'finishedAt': utc_now(),
        'config': asdict(config),
        'finalMetrics': result.final_metrics,
        'bestEpoch': result.best_epoch,
        'artifacts': {
            'checkpoint': result.checkpoint,
            'lastCheckpoint': result.last_checkpoint,
            'metrics': result.metrics,
            'config': config_echo},
        'versions': get_versions()}
    write_manifest(path.join(out_dir, MANIFEST_FILE), manifest)

    final = result.final_metrics
    click.echo('checkpoint: {}'.format(result.checkpoint))
    click.echo('test {}: {}'.format(QUALITY[config.task],
                                    final.get('testQuality')))
    return OK


@cli.command(name='eval')
@click.argument('model_file', type=click.Path())
@click.option('--split', default='test', type=click.Choice(SPLITS),
              help='Split to evaluate.')
@click.option('--data', help='Data prefix; defaults to the training DATA.')
@click.option('--pruned', is_flag=True,
              help='Zero weights with log alpha above the threshold.')
@click.option('--threshold', type=float, default=None,
              help='Pruning threshold; defaults to THRESHOLD.')
@exit_on_error
def cmd_eval(model_file, split, data, pruned, threshold):
    '''Mean-weight quality (bpc or MSE) of a checkpoint or export'''
    model, config, symbols = load_model(model_file)
    if data:
        config = replace(config, data=data)
    task_data = load_task_data(config, vocab=Vocab(symbols))
    if not task_data.has_split(split):
        raise DataError('split not found: {}'.format(split))

    if pruned and hasattr(model, 'variational_weights'):
        if not model.variational_weights():
            raise SparsityError(
                    'checkpoint has no posterior weights to prune')
    else:
        pruned = False
    if threshold is None:
        threshold = config.threshold

    quality = evaluate(model, task_data, split, pruned, threshold)
    click.echo('{} {}: {:.6f}'.format(split, QUALITY[config.task], quality))
    return OK


@cli.command(name='prune')
@click.argument('checkpoint_file', type=click.Path())
@click.option('--threshold', type=float, default=3.0,
              help='log alpha threshold.')
@click.option('--out', 'out_file', type=click.Path(),
              help='Sparse export path.')
@exit_on_error
def cmd_prune(checkpoint_file, threshold, out_file):
    '''Writes a CSR export and prints sparsity as x – h [– y]'''
    checkpoint = load_checkpoint(checkpoint_file)
    if not checkpoint.has_posterior():
        raise SparsityError(
                '{} holds no log sigma^2 tensors; only checkpoints trained '
                'with MODE = sparse-vd can be pruned'.format(checkpoint_file))
    model = model_from_checkpoint(checkpoint)
    if out_file is None:
        out_file = path.join(path.dirname(checkpoint_file), EXPORT_FILE)

    report = export_sparse(model, out_file, threshold,
                           meta={'config': checkpoint.meta['config'],
                                 'vocab': checkpoint.symbols})
    click.echo('sparsity % (x – h [– y]): {}'.format(
        format_sparsity(report)))
    click.echo('export: {}'.format(out_file))

    config = checkpoint.config
    try:
        task_data = load_task_data(config, vocab=Vocab(checkpoint.symbols))
    except DataError as e:
        click.echo('quality delta skipped: {}'.format(e))
        return OK
    for split in ('valid', 'test'):
        if not task_data.has_split(split):
            continue
        dense = evaluate(model, task_data, split)
        sparse = evaluate(model, task_data, split, True, threshold)
        click.echo('{} {}: {:.6f} -> {:.6f} (delta {:+.6f})'.format(
            split, QUALITY[config.task], dense, sparse, sparse - dense))
    return OK


@cli.command(name='report')
@click.argument('metrics_files', nargs=-1, required=True,
                type=click.Path())
@click.option('--csv', 'csv_file', type=click.Path(),
              help='Write per-epoch series as CSV.')
@exit_on_error
def cmd_report(metrics_files, csv_file):
    '''Summary table plus plot-ready per-epoch series'''
    runs = []
    for filename in metrics_files:
        records = read_metrics(filename)
        runs.append((get_label(records, filename), records))

    if csv_file:
        with open(csv_file, 'w', newline='') as file:
            writer = csv_writer(file)
            writer.writerow(CSV_FIELDS)
            for label, records in runs:
                for record in records:
                    writer.writerow([label] + [
                        '' if record.get(key) is None else record[key]
                        for key in CSV_FIELDS[1:]])
        click.echo('series: {}'.format(csv_file))

    click.echo('{:<24} {:>6} {:>12} {:>12}  {}'.format(
        'label', 'epoch', 'test', 'test pruned', 'sparsity'))
    for label, records in runs:
        last = records[-1]
        report = {group: last.get('sparsity' + group.upper())
                  for group in ('x', 'h', 'y')}
        report = {k: v for k, v in report.items() if v is not None}
        click.echo('{:<24} {:>6} {:>12} {:>12}  {}'.format(
            label, last['epoch'], format_quality(last.get('testQuality')),
            format_quality(last.get('testQualityPruned')),
            format_sparsity(report) if report else '-'))
    return OK


def format_quality(value):
    return '-' if value is None else '{:.4f}'.format(value)


@cli.command(name='generate')
@click.argument('task', type=click.Choice(TASKS))
@click.option('--out', 'prefix', required=True,
              help='Output prefix, e.g. data/synthetic.')
@click.option('--seed', type=int, default=0)
@click.option('--size', type=int, default=None,
              help='Training sequences (sentiment) or characters (charlm).')
@click.option('--length', type=int, default=20,
              help='Tokens per synthetic review.')
@exit_on_error
def cmd_generate(task, prefix, seed, size, length):
    '''Writes a synthetic dataset for desk-scale runs'''
    sizes = dict(GENERATED_SIZES[task])
    if size is not None:
        scale = size / sizes['train']
        sizes = {split: max(1, int(count * scale))
                 for split, count in sizes.items()}
    directory = path.dirname(prefix)
    if directory:
        make_dir(directory)
    for filename in generate_dataset(task, prefix, sizes, seed, length):
        click.echo(filename)
    return OK


def main():
    cli()


if __name__ == '__main__':
    main()
