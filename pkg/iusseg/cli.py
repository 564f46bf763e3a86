"""
Command line interface of iusseg.

    iusseg [--config JSON] [--seed N] [--output DIR] [--threads N] COMMAND ...

Commands: simulate, compound, resample, gen-dataset, split, train, predict,
evaluate, report, transfer. --threads changes scheduling only, never
results. Every failure is printed to stderr as one JSON object

    {"error": <exception class>, "message": <text>, "command": <command>}

with exit code 1 (2 for usage errors).
"""

import json
import os
import sys
from typing import Optional

import click

from iusseg.log.log import logger, attach_logfile
from iusseg.volume.vol import resample, as_interpolation
from iusseg.volume.vol_io import load_volume, save_volume
from iusseg.tissue.tss import (bind_tissue_map, default_property_table, load_property_table, relabel_freesurfer)
from iusseg.tissue.tss_phantom import brain_phantom
from iusseg.simulate.sim import simulate_sweep, linear_trajectory, save_sweep, load_sweep
from iusseg.simulate.sim_physics import ProbeGeometry, ImagingParams
from iusseg.compound.cmpnd import CompoundingConfig, compound, coverage_mask
from iusseg.metrics.mtrc import evaluate_case, aggregate, write_case_reports, write_aggregate
from iusseg.augment.agmnt import PatchSpec
from iusseg.learn.lrn_ckpt import load_checkpoint
from iusseg.learn.lrn import predict_volume
from iusseg.pipeline.ppln_config import ConfigError, experiment_config_from_dict
from iusseg.pipeline.ppln_split import make_splits, save_split_manifest
from iusseg.pipeline.ppln_dataset import (DatasetConfig, load_dataset_config, generate_simulated_dataset,
                                          load_dataset_manifest, subjects_of)
from iusseg.pipeline.ppln import run_experiment, transfer_experiment, resolve_splits
from iusseg.inform.infrm import report as write_report

DEFAULT_OUTPUT = 'iusseg_out'


def emit_error(e: Exception, command: Optional[str]) -> None:
    click.echo(json.dumps({'error': type(e).__name__, 'message': str(e), 'command': command}), err=True)


class JsonErrorGroup(click.Group):
    """A click group reporting every failure as a JSON object on stderr."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.exceptions.UsageError):
            raise
        except Exception as e:
            logger.error('%s failed: %s', ctx.invoked_subcommand, e)
            emit_error(e, ctx.invoked_subcommand)
            ctx.exit(1)

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.exceptions.ClickException as e:
            command = getattr(e, 'ctx', None)
            emit_error(e, command.info_name if command is not None else None)
            sys.exit(e.exit_code)
        except click.exceptions.Abort as e:
            emit_error(e, None)
            sys.exit(1)
        if isinstance(rv, int) and rv != 0:
            sys.exit(rv)
        return rv


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, 'r') as fr:
            return json.load(fr)
    except OSError as e:
        raise ConfigError('cannot read (%s)' % e, path)
    except ValueError as e:
        raise ConfigError('not valid JSON (%s)' % e, path)


def _output(ctx) -> str:
    directory = ctx.obj['output'] or DEFAULT_OUTPUT
    os.makedirs(directory, exist_ok=True)
    attach_logfile(directory)
    return directory


def _table(path: Optional[str]):
    return load_property_table(path) if path else default_property_table()


@click.group(cls=JsonErrorGroup)
@click.option('--config', 'config', type=click.Path(), default=None, help='JSON configuration of the command')
@click.option('--seed', type=int, default=None, help='seed of all random draws (overrides the config)')
@click.option('--output', type=click.Path(), default=None, help='output directory')
@click.option('--threads', type=int, default=1, show_default=True, help='worker threads; never changes results')
@click.pass_context
def cli(ctx, config, seed, output, threads):
    """Ultrasound simulation and segmentation experiments."""
    if threads < 1:
        raise click.BadParameter('must be >= 1', param_hint='--threads')
    ctx.obj = {'config': config, 'seed': seed, 'output': output, 'threads': threads}


@cli.command()
@click.argument('tissue_map', type=click.Path(exists=True))
@click.option('--properties', type=click.Path(exists=True), default=None, help='acoustic property table JSON')
@click.option('--freesurfer', is_flag=True, help='relabel FreeSurfer aseg codes first')
@click.pass_context
def simulate(ctx, tissue_map, properties, freesurfer):
    """Simulate a sweep over TISSUE_MAP (.mhd labels).

    --config: {"probe": {...}, "imaging": {...}, "trajectory": {"n_frames",
    "margin_mm", "tilt_deg", "foreground_labels"}}
    """
    doc = _read_json(ctx.obj['config'])
    geom = ProbeGeometry.from_dict(doc.get('probe', {}))
    imaging = dict(doc.get('imaging', {}))
    if ctx.obj['seed'] is not None:
        imaging['seed'] = ctx.obj['seed']
    params = ImagingParams.from_dict(imaging)
    labels = load_volume(tissue_map)
    if freesurfer:
        labels = relabel_freesurfer(labels)
    table, background = _table(properties)
    tm = bind_tissue_map(labels, table, background, id=os.path.splitext(os.path.basename(tissue_map))[0])
    trajectory = doc.get('trajectory', {})
    poses = linear_trajectory(tm, int(trajectory.get('n_frames', 24)), geom, trajectory.get('foreground_labels'),
                              float(trajectory.get('margin_mm', 0.0)), float(trajectory.get('tilt_deg', 0.0)))
    sweep = simulate_sweep(tm, poses, geom, params, ctx.obj['threads'])
    directory = os.path.join(_output(ctx), 'sweep')
    save_sweep(sweep, directory)
    click.echo(directory)


@cli.command('compound')
@click.argument('sweep_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--spacing', type=float, default=None, help='target spacing in mm')
@click.option('--hole-fill', type=int, default=None, help='hole-fill radius in voxels')
@click.option('--accumulation', type=click.Choice(['mean', 'max']), default=None)
@click.option('--mask/--no-mask', default=False, help='also write the coverage mask')
@click.pass_context
def compound_command(ctx, sweep_dir, spacing, hole_fill, accumulation, mask):
    """Compound the sweep in SWEEP_DIR into volume.mhd."""
    d = _read_json(ctx.obj['config'])
    for key, value in (('target_spacing_mm', spacing), ('hole_fill_radius_voxels', hole_fill),
                       ('accumulation', accumulation)):
        if value is not None:
            d[key] = value
    cfg = CompoundingConfig.from_dict(d)
    sweep = load_sweep(sweep_dir)
    output = _output(ctx)
    save_volume(compound(sweep, cfg, ctx.obj['threads']), os.path.join(output, 'volume.mhd'))
    if mask:
        save_volume(coverage_mask(sweep, cfg, ctx.obj['threads']), os.path.join(output, 'coverage.mhd'))
    click.echo(os.path.join(output, 'volume.mhd'))


@cli.command('resample')
@click.argument('source', type=click.Path(exists=True))
@click.argument('target')
@click.option('--spacing', type=float, nargs=3, required=True, help='target spacing in mm (x y z)')
@click.option('--interp', type=click.Choice(['nearest', 'trilinear']), default=None,
              help='default: nearest for labels, trilinear otherwise')
def resample_command(source, target, spacing, interp):
    """Resample SOURCE onto a grid of the given spacing, write TARGET."""
    vol = load_volume(source)
    if interp is None:
        interp = 'nearest' if vol.is_label else 'trilinear'
    save_volume(resample(vol, spacing, as_interpolation(interp)), target)


@cli.command('gen-dataset')
@click.argument('tissue_maps', nargs=-1, type=click.Path(exists=True))
@click.option('--phantoms', type=int, default=0, help='use N brain phantoms instead of tissue maps')
@click.option('--phantom-dims', type=int, nargs=3, default=(40, 40, 40), show_default=True)
@click.option('--freesurfer', is_flag=True, help='relabel FreeSurfer aseg codes first')
@click.option('--sweeps-per-combo', type=int, default=None)
@click.pass_context
def gen_dataset(ctx, tissue_maps, phantoms, phantom_dims, freesurfer, sweeps_per_combo):
    """Simulate, compound and label a dataset (--config: dataset configuration)."""
    cfg = load_dataset_config(ctx.obj['config']) if ctx.obj['config'] else DatasetConfig()
    seed = ctx.obj['seed'] or 0
    maps = []
    for path in tissue_maps:
        labels = load_volume(path)
        maps.append((os.path.splitext(os.path.basename(path))[0], relabel_freesurfer(labels) if freesurfer else labels))
    for k in range(phantoms):
        maps.append(('phantom%02d' % k, brain_phantom(phantom_dims, 0.5, seed + k)))
    if not maps:
        raise click.UsageError('give tissue maps or --phantoms N')
    manifest = generate_simulated_dataset(maps, cfg, seed, _output(ctx), ctx.obj['threads'], sweeps_per_combo)
    click.echo(json.dumps({'items': len(manifest['items']), 'errors': len(manifest['errors'])}))


@cli.command()
@click.option('--dataset', type=click.Path(exists=True), default=None, help='dataset manifest to take subjects from')
@click.option('--subjects', default=None, help='comma separated subject ids')
@click.option('--folds', type=int, default=5, show_default=True)
@click.pass_context
def split(ctx, dataset, subjects, folds):
    """Write splits.json, a cross-validation split manifest."""
    if dataset:
        ids = subjects_of(load_dataset_manifest(dataset))
    elif subjects:
        ids = [s.strip() for s in subjects.split(',') if s.strip()]
    else:
        raise click.UsageError('give --dataset or --subjects')
    manifest = make_splits(ids, folds, ctx.obj['seed'] or 0)
    path = os.path.join(_output(ctx), 'splits.json')
    save_split_manifest(manifest, path)
    click.echo(path)


@cli.command()
@click.option('--fold', 'folds', type=int, multiple=True, help='fold id (repeatable; default: all folds)')
@click.option('--mode', type=click.Choice(['scratch', 'finetuned']), default=None, help='overrides the config')
@click.pass_context
def train(ctx, folds, mode):
    """Run experiment folds: train, predict the test subjects, evaluate
    (--config: experiment configuration)."""
    if not ctx.obj['config']:
        raise click.UsageError('train needs --config')
    doc = _read_json(ctx.obj['config'])
    if mode is not None:
        doc['mode'] = mode
    try:
        cfg = experiment_config_from_dict(doc)
    except ConfigError as e:
        raise ConfigError(e.reason, ctx.obj['config'])
    cfg = cfg.with_overrides(seed=ctx.obj['seed'], output_dir=ctx.obj['output'])
    attach_logfile(cfg.output_dir)
    if not folds:
        folds = [f.fold_id for f in resolve_splits(cfg, load_dataset_manifest(cfg.real_dataset)).folds]
    for fold in folds:
        click.echo(run_experiment(cfg, fold))


@cli.command()
@click.argument('checkpoint', type=click.Path(exists=True))
@click.argument('image', type=click.Path(exists=True))
@click.argument('target')
@click.option('--patch', type=int, nargs=3, default=(32, 32, 32), show_default=True)
@click.option('--overlap', type=float, default=0.25, show_default=True)
@click.option('--threshold', type=float, default=0.5, show_default=True)
@click.pass_context
def predict(ctx, checkpoint, image, target, patch, overlap, threshold):
    """Segment IMAGE with the network in CHECKPOINT, write TARGET."""
    net, _, _ = load_checkpoint(checkpoint)
    divisor = net.config.divisor
    if any(p < 1 or p % divisor for p in patch):
        raise click.BadParameter('every side of %s must be a positive multiple of %d for this network'
                                 % (tuple(patch), divisor), ctx=ctx, param_hint='--patch')
    save_volume(predict_volume(net, load_volume(image), PatchSpec(patch), overlap, threshold), target)


@cli.command()
@click.argument('pairs', nargs=-1, required=True)
@click.option('--fold', type=int, default=0)
@click.pass_context
def evaluate(ctx, pairs, fold):
    """Evaluate PREDICTION=TRUTH pairs of masks; writes cases.csv and
    aggregate.json. The case id is the prediction file name."""
    reports = []
    for pair in pairs:
        if pair.count('=') != 1:
            raise click.BadParameter('expected PREDICTION=TRUTH, got %r' % pair, param_hint='PAIRS')
        pred, truth = pair.split('=')
        case_id = os.path.splitext(os.path.basename(pred))[0]
        reports.append(evaluate_case(load_volume(pred), load_volume(truth), case_id, fold))
    output = _output(ctx)
    write_case_reports(reports, os.path.join(output, 'cases.csv'))
    write_aggregate(aggregate(reports), os.path.join(output, 'aggregate.json'))
    click.echo(os.path.join(output, 'cases.csv'))


@cli.command()
@click.argument('runs', nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--fine', is_flag=True, help='compare against fine labels (cases_fine.csv)')
@click.pass_context
def report(ctx, runs, fine):
    """Compare the case reports of RUNS across training modes."""
    bundle = write_report(list(runs), _output(ctx), 'cases_fine.csv' if fine else 'cases.csv')
    click.echo(bundle.table)


@cli.command()
@click.option('--seeds', type=int, default=5, show_default=True, help='number of seeds, starting at --seed')
@click.option('--subjects', type=int, default=6, show_default=True, help='tissue maps per family')
@click.option('--pretrain-iterations', type=int, default=200, show_default=True)
@click.option('--iterations', type=int, default=50, show_default=True)
@click.option('--lr', type=float, default=1e-3, show_default=True)
@click.pass_context
def transfer(ctx, seeds, subjects, pretrain_iterations, iterations, lr):
    """Scratch vs fine-tuned training on two synthetic phantom families."""
    first = ctx.obj['seed'] or 0
    df = transfer_experiment(_output(ctx), list(range(first, first + seeds)), subjects, pretrain_iterations,
                             iterations, lr=lr, threads=ctx.obj['threads'])
    click.echo(df.to_string(index=False))


def main():
    cli(prog_name='iusseg')


if __name__ == '__main__':
    main()
