"""
Main entry point for the sideov CLI and scripting interfaces.
"""

import logging
import os
import platform
import sys
from collections import OrderedDict
from functools import wraps

from andes.main import config_logger as ad_config_logger
from andes.shared import coloredlogs, unittest
from andes.utils.misc import elapsed, is_interactive

from sideov.core.config import RunConfig
from sideov.core.errors import CheckpointError, DataError, InvalidConcept, SideovError
from sideov.shared import extra_tests_env, np, torch
from sideov.system import System
from sideov.utils import parse_list
from sideov.utils.paths import confirm_overwrite, get_log_dir, tests_root

logger = logging.getLogger(__name__)

# default artifact names under ``--out-dir``
DEFAULT_NAMES = OrderedDict((('generate', 'dataset'),
                             ('train', 'pretrain.pt'),
                             ('finetune_openset', 'openset_ft.pt'),
                             ('finetune_grounding', 'grounding_ft.pt'),
                             ('eval', 'metrics.json'),
                             ('report', 'ablation.csv'),
                             ))

# suffixes removed by ``misc --clean``
OUTPUT_SUFFIXES = ('_det.jsonl', '_det.png', '_curve.csv', '_proposals.png')


def config_logger(stream_level=logging.INFO, *,
                  stream=True,
                  file=True,
                  log_file='sideov.log',
                  log_path=None,
                  file_level=logging.DEBUG,
                  ):
    """
    Configure a sideov logger with a `FileHandler` and a `StreamHandler`.

    This function is called at the beginning of ``sideov.cli.main()``.
    Updating ``stream_level`` and ``file_level`` is supported.

    Parameters
    ----------
    stream : bool, optional
        Create a `StreamHandler` for `stdout` if ``True``.
    file : bool, optional
        True if logging to ``log_file``.
    log_file : str, optional
        Log file name for `FileHandler`, ``'sideov.log'`` by default.
        If ``None``, the `FileHandler` will not be created.
    log_path : str, optional
        Path to store the log file. By default, the path is generated by
        ``get_log_dir()``.
    stream_level : {1, 10, 20, 30, 40, 50}, optional
        `StreamHandler` verbosity level. 1 adds the logger name and line.
    file_level : {10, 20, 30, 40, 50}, optional
        `FileHandler` verbosity level.
    """
    ad_config_logger(stream_level)
    lg = logging.getLogger('sideov')
    lg.setLevel(logging.DEBUG)

    sh_formatter_str = '%(message)s'
    if stream_level == 1:
        sh_formatter_str = '%(name)s:%(lineno)d - %(levelname)s - %(message)s'
        stream_level = 10

    sh_formatter = logging.Formatter(sh_formatter_str)
    if len(lg.handlers) == 0:

        if stream is True:
            sh = logging.StreamHandler()
            sh.setFormatter(sh_formatter)
            sh.setLevel(stream_level)
            lg.addHandler(sh)

        # file handler for level DEBUG and up
        if file is True and (log_file is not None):
            if log_path is None:
                log_path = get_log_dir()
            log_full_path = os.path.join(log_path, log_file)
            fh_formatter = logging.Formatter('%(process)d: %(asctime)s - %(name)s - %(levelname)s - %(message)s')
            fh = logging.FileHandler(log_full_path)
            fh.setLevel(file_level)
            fh.setFormatter(fh_formatter)
            lg.addHandler(fh)

        globals()['logger'] = lg

    else:
        set_logger_level(lg, logging.StreamHandler, stream_level)
        set_logger_level(lg, logging.FileHandler, file_level)

    if not is_interactive():
        coloredlogs.install(logger=lg, level=stream_level, fmt=sh_formatter_str)


def set_logger_level(lg, type_to_set, level):
    """
    Set logging level for the given type of handler.
    """

    for h in lg.handlers:
        if isinstance(h, type_to_set):
            h.setLevel(level)


def find_log_path(lg):
    """
    Find the file paths of the FileHandlers.
    """
    out = []
    for h in lg.handlers:
        if isinstance(h, logging.FileHandler):
            out.append(h.baseFilename)
    return out


def command(func):
    """
    Wrap a command: time it and map package errors to exit codes.

    With ``cli=True`` the wrapped function returns the exit code, 0 on
    success, 2 for usage and input errors and 1 for runtime failures.
    Otherwise it returns the command's result and errors propagate.
    """

    @wraps(func)
    def wrapper(*args, cli=False, **kwargs):
        t0, _ = elapsed()
        try:
            ret = func(*args, **kwargs)
        except SideovError as e:
            _, s = elapsed(t0)
            logger.error('%s: %s', type(e).__name__, e)
            logger.info('-> <%s> exit with an error in %s.', func.__name__, s)
            if cli:
                return e.exit_code
            raise
        _, s = elapsed(t0)
        logger.info('-> <%s> finished in %s.', func.__name__, s)
        if cli:
            return 0
        return ret

    return wrapper


def _options(config_option):
    if not config_option:
        return None
    if isinstance(config_option, str):
        return [config_option]
    return list(config_option)


def load(checkpoint=None, config=None, config_option=None, seed=None, **kwargs):
    """
    Build a System, from a checkpoint if given.

    Parameters
    ----------
    checkpoint : str, optional
        Checkpoint file; its stored config is used and ``config`` ignored.
    config : str, optional
        rc file path.
    config_option : list of str, optional
        ``Section.key=value`` overrides.
    seed : int, optional
        Global seed.

    Returns
    -------
    System
    """
    options = _options(config_option)
    if checkpoint is not None:
        return System.from_checkpoint(checkpoint, options=options, seed=seed)
    return System(config_path=config, options=options, seed=seed)


def _out_path(out, out_dir, name):
    if out:
        return out
    return os.path.join(out_dir or '.', DEFAULT_NAMES[name])


def _load_dataset(path):
    from sideov.io.dataset import load_dataset

    if path is None:
        raise DataError('A dataset directory is required (--dataset)')
    return load_dataset(path)


@command
def generate(n_images=None, out=None, out_dir='.', force=False, config=None, config_option=None,
             seed=None, **kwargs):
    """
    Generate the synthetic dataset and write it to ``out``.

    Returns
    -------
    str or None
        The dataset path, or None if it exists and ``force`` is False.
    """
    from sideov.io.dataset import save_dataset

    path = _out_path(out, out_dir, 'generate')
    if not confirm_overwrite(path, force):
        return None
    system = load(config=config, config_option=config_option, seed=seed)
    dataset = system.generate(n_images)
    save_dataset(dataset, path, overwrite=force)
    return path


def _train_phase(routine, dataset, out, resume=None, checkpoint=None, force=False, config=None,
                 config_option=None, seed=None):
    from sideov.io.checkpoint import load_checkpoint

    if not confirm_overwrite(out, force or (resume is not None and os.path.abspath(resume) == os.path.abspath(out))):
        return None
    ds = _load_dataset(dataset)
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        system = load(checkpoint=ckpt, config_option=config_option, seed=seed)
    elif checkpoint is not None:
        system = load(checkpoint=checkpoint, config_option=config_option, seed=seed)
    else:
        system = load(config=config, config_option=config_option, seed=seed)
    rtn = system.routines[routine]
    if checkpoint is not None and resume is None and not system.checkpoint.tagged('pretrain'):
        logger.warning('Checkpoint "%s" is not tagged as pre-trained.', checkpoint)
    if config is not None and (checkpoint is not None or resume is not None):
        logger.warning('--config is ignored; the checkpoint config is used.')
    system.summary()
    rtn.run(dataset=ds, out=out, resume=ckpt)
    return system


@command
def train(dataset=None, out=None, out_dir='.', resume=None, force=False, config=None, config_option=None,
          seed=None, **kwargs):
    """
    Pre-train the detector with RPN proposals.

    Parameters
    ----------
    dataset : str
        Dataset directory.
    out : str, optional
        Checkpoint path, ``<out_dir>/pretrain.pt`` by default.
    resume : str, optional
        Partial checkpoint of this phase to continue from.

    Returns
    -------
    System or None
    """
    out = _out_path(out, out_dir, 'train')
    return _train_phase('Pretrain', dataset, out, resume, None, force, config, config_option, seed)


@command
def finetune_openset(checkpoint=None, dataset=None, out=None, out_dir='.', resume=None, force=False,
                     config=None, config_option=None, seed=None, **kwargs):
    """
    Fine-tune a pre-trained checkpoint with open-set proposals.
    """
    if checkpoint is None and resume is None:
        raise CheckpointError('A pre-trained checkpoint is required (--checkpoint)')
    out = _out_path(out, out_dir, 'finetune_openset')
    return _train_phase('OpensetFinetune', dataset, out, resume, checkpoint, force, config,
                        config_option, seed)


@command
def finetune_grounding(checkpoint=None, dataset=None, out=None, out_dir='.', resume=None, force=False,
                       config=None, config_option=None, seed=None, **kwargs):
    """
    Fine-tune a checkpoint on alternating detection and grounding batches.
    """
    if checkpoint is None and resume is None:
        raise CheckpointError('A pre-trained checkpoint is required (--checkpoint)')
    out = _out_path(out, out_dir, 'finetune_grounding')
    return _train_phase('GroundingFinetune', dataset, out, resume, checkpoint, force, config,
                        config_option, seed)


@command
def eval(checkpoint=None, dataset=None, vocab='all', mode=None, with_masks=False, zero_shot=False,
         metrics_out=None, out_dir='.', force=False, config_option=None, seed=None, **kwargs):
    """
    Evaluate a checkpoint on the validation split and write metrics JSON.

    Parameters
    ----------
    vocab : {'seen', 'novel', 'all'}
        Reported vocabulary split; inference always uses all concepts.
    mode : {'rpn', 'seg', 'open'}, optional
        Proposal mode, ``RPN.mode`` by default.
    zero_shot : bool
        Report seen, novel and the shuffled-embedding baseline instead.

    Returns
    -------
    dict or None
        Name to EvalResult.
    """
    from sideov.models.rpn import ProposalMode
    from sideov.report import write_metrics

    if checkpoint is None:
        raise CheckpointError('A checkpoint is required (--checkpoint)')
    path = _out_path(metrics_out, out_dir, 'eval')
    if not confirm_overwrite(path, force):
        return None
    ds = _load_dataset(dataset)
    system = load(checkpoint=checkpoint, config_option=config_option, seed=seed)
    mode = ProposalMode(mode or system.config.RPN.mode)
    if zero_shot:
        metrics = system.ZeroShotEval.run(dataset=ds, mode=mode)
    else:
        metrics = system.Evaluate.run(dataset=ds, split=vocab, mode=mode, with_masks=with_masks)
    write_metrics(path, metrics, system, checkpoint=os.path.basename(checkpoint), mode=mode.value,
                  split='zero_shot' if zero_shot else vocab)
    return metrics


def _parse_concepts(concepts):
    out = []
    for item in concepts or []:
        out.extend(c.strip() for c in item.split(','))
    if len(out) == 0 or any(c == '' for c in out):
        raise InvalidConcept('The concept list is empty or contains a blank concept')
    return out


def _parse_point(point):
    try:
        x, y = (float(v) for v in parse_list(point))
    except ValueError:
        raise DataError(f'Point prompt <{point}> must read X,Y')
    return x, y


@command
def detect(checkpoint=None, image=None, concepts=None, with_masks=False, point=None, mode=None,
           out=None, png=None, out_dir='.', force=False, config_option=None, seed=None, **kwargs):
    """
    Detect concepts in one PNG image.

    Writes JSON-lines detections and, with ``png``, an annotated image.

    Returns
    -------
    list of Detection or None
    """
    from sideov.io.jsonl import detection_rows, write_jsonl
    from sideov.io.png import read_png
    from sideov.models.rpn import ProposalMode
    from sideov.plot import render_detections

    names = _parse_concepts(concepts)
    if image is None:
        raise DataError('An image is required (--image)')
    if checkpoint is None:
        raise CheckpointError('A checkpoint is required (--checkpoint)')
    stem = os.path.splitext(os.path.basename(image))[0]
    out = out or os.path.join(out_dir or '.', f'{stem}_det.jsonl')
    if not confirm_overwrite(out, force):
        return None

    pixels = read_png(image)
    system = load(checkpoint=checkpoint, config_option=config_option, seed=seed)
    model = system.model
    model.eval()
    size = model.image_size
    if pixels.shape[:2] != size:
        raise DataError(f'Image "{image}" is {pixels.shape[:2]}, the model expects {size}')
    np_image = pixels.astype(np.float64) / 255.0

    if point is not None:
        dets = [model.detect_point(np_image, _parse_point(point), names)]
    else:
        images = torch.as_tensor(np_image.transpose(2, 0, 1)[None].copy(), dtype=model.dtype)
        mode = ProposalMode(mode or system.config.RPN.mode)
        dets = model.detect(images, [np_image], names, mode, with_masks, [('detect', stem)])[0].detections

    write_jsonl(out, detection_rows(stem, dets, with_rle=with_masks or point is not None))
    logger.info('%d detections written to "%s".', len(dets), out)
    if png:
        render_detections(pixels, dets, png, names)
    return dets


def proposal_figure(system, record, path, modes=('rpn', 'open')):
    """
    Render the proposals of several modes on one record.
    """
    from sideov.models.rpn import ProposalMode
    from sideov.plot import render_proposals

    model = system.model
    model.eval()
    np_image = record.float_image()
    images = torch.as_tensor(np_image.transpose(2, 0, 1)[None].copy(), dtype=model.dtype)
    props = OrderedDict()
    with torch.no_grad():
        feats = model.features(images)
        for mode in modes:
            props[mode] = model.proposals(feats, [np_image], ProposalMode(mode),
                                          [('figure', record.image_id)])[0]
    return render_proposals(record.image, record.annotations, props, path,
                            system.config.RPN.merge_threshold)


@command
def report(dataset=None, baseline=None, extractor=None, full=None, out=None, out_dir='.',
           proposal_figure_index=None, force=False, config=None, config_option=None, seed=None,
           **kwargs):
    """
    Ablation table of the SideFormer variants over the proposal modes.

    Parameters
    ----------
    baseline, extractor, full : str, optional
        Checkpoints of the variants; missing ones give absent cells.
    proposal_figure_index : int, optional
        Also render RPN vs open-set proposals of this val image with the
        ``full`` checkpoint.

    Returns
    -------
    pandas.DataFrame or None
    """
    from sideov.report import Report

    path = _out_path(out, out_dir, 'report')
    if not confirm_overwrite(path, force):
        return None
    ds = _load_dataset(dataset)
    system = load(config=config, config_option=config_option, seed=seed)
    checkpoints = OrderedDict((('baseline', baseline), ('extractor', extractor), ('full', full)))
    df = system.AblationReport.run(dataset=ds, checkpoints=checkpoints)
    Report(system).write(df, path)

    if proposal_figure_index is not None:
        if full is None or not os.path.isfile(full):
            logger.warning('Proposal figure needs the <full> checkpoint.')
        else:
            records = ds.val
            if not 0 <= proposal_figure_index < len(records):
                raise DataError(f'Val image index {proposal_figure_index} out of range [0, {len(records)})')
            stem, _ = os.path.splitext(path)
            proposal_figure(load(checkpoint=full), records[proposal_figure_index], f'{stem}_proposals.png')
    return df


def misc(save_config='', clean=False, recursive=False, version=False, force=False, config=None,
         config_option=None, seed=None, cli=False, **kwargs):
    """
    Miscellaneous commands.
    """
    try:
        if save_config != '':
            save_conf(save_config, overwrite=force, config=config, config_option=config_option, seed=seed)
        elif clean is True:
            remove_output(recursive)
        elif version is True:
            versioninfo()
        else:
            logger.info("info: no option specified. Use 'sideov misc -h' for help.")
    except SideovError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code if cli else None
    return 0 if cli else None


def versioninfo():
    """
    Print version info for sideov and dependencies.
    """
    import andes

    from sideov import __version__

    versions = {'Python': platform.python_version(),
                'sideov': __version__,
                'torch': torch.__version__,
                'numpy': np.__version__,
                'andes': andes.__version__,
                }
    maxwidth = max([len(k) for k in versions.keys()])

    for key, val in versions.items():
        print(f"{key: <{maxwidth}}  {val}")


def save_conf(config_path=None, overwrite=False, config=None, config_option=None, seed=None, **kwargs):
    """
    Save the merged config with help comments to ``config_path``.

    Parameters
    ----------
    config_path : None or str
        Target file or directory. Save to ``~/.sideov/sideov.rc`` if None.

    Returns
    -------
    bool
        True if the file is written.
    """
    from sideov.utils.paths import get_dot_sideov_path

    if config_path is None:
        config_path = os.path.join(get_dot_sideov_path(), 'sideov.rc')
    elif os.path.isdir(config_path):
        config_path = os.path.join(config_path, 'sideov.rc')
    if not confirm_overwrite(config_path, overwrite):
        return False

    rc = RunConfig(config_path=config, options=_options(config_option), seed=seed)
    rc.save(config_path)
    return True


def remove_output(recursive=False):
    """
    Remove the detection, figure and curve outputs in the working directory.

    Returns
    -------
    bool
        True if any file was found.
    """
    found = False
    cwd = os.getcwd()

    if recursive:
        dirs = [x[0] for x in os.walk(cwd)]
    else:
        dirs = (cwd,)

    for d in dirs:
        for file in os.listdir(d):
            if file.endswith(OUTPUT_SUFFIXES):
                found = True
                try:
                    os.remove(os.path.join(d, file))
                    logger.info('"%s" removed.', os.path.join(d, file))
                except IOError:
                    logger.error('Error removing file "%s".', os.path.join(d, file))
    if not found:
        logger.info('No output file found in the working directory.')

    return found


def selftest(extra=False, cli=False, **kwargs):
    """
    Run unit tests.

    Tests whose names contain ``extra_test`` are the long training runs and
    are skipped unless ``extra`` is True.
    """

    # map verbosity level from logging to unittest
    vmap = {1: 3, 10: 3, 20: 2, 30: 1, 40: 1, 50: 1}
    verbose = vmap[kwargs.get('verbose', 20)]

    extra_test = 'extra_test'
    if extra:
        os.environ[extra_tests_env] = '1'

    try:
        logger.handlers[0].setLevel(logging.WARNING)
        sys.stdout = open(os.devnull, 'w')  # suppress print statements
    except IndexError:  # logger not set up
        pass

    suite = unittest.TestLoader().discover(tests_root())

    for test_group in suite._tests:
        for test_class in test_group._tests:
            if not hasattr(test_class, '_tests'):
                continue
            tests_keep = list()
            for t in test_class._tests:
                if (extra is not True) and (extra_test in getattr(t, '_testMethodName', '')):
                    continue
                tests_keep.append(t)
            test_class._tests = tests_keep

    result = unittest.TextTestRunner(verbosity=verbose).run(suite)
    sys.stdout = sys.__stdout__
    if cli:
        return 0 if result.wasSuccessful() else 1
    return result
