"""
sideov command-line interface and argument parsers.
"""
import argparse
import importlib
import logging
import platform
from time import strftime

from sideov.main import config_logger
from sideov.utils.paths import get_log_dir

logger = logging.getLogger(__name__)

command_aliases = {
    'selftest': ['st'],
}

# commands that log without the preamble
quiet_commands = ('misc', 'selftest')

PROPOSAL_MODES = ('rpn', 'seg', 'open')


def _global_parser():
    """
    Options shared by all commands; accepted before or after the command.
    """
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('-v', '--verbose',
                        help='Verbosity level in 10-DEBUG, 20-INFO, 30-WARNING, '
                             'or 40-ERROR. 1 adds the logger name and line.',
                        type=int, default=argparse.SUPPRESS, choices=(1, 10, 20, 30, 40))
    parser.add_argument('--config', help='Config file (rc) path', type=str, default=argparse.SUPPRESS)
    parser.add_argument('--seed', help='Global seed overriding System.seed', type=int,
                        default=argparse.SUPPRESS)
    parser.add_argument('--out-dir', help='Directory of default outputs', type=str, default=argparse.SUPPRESS)
    parser.add_argument('--force', help='Overwrite existing outputs', action='store_true',
                        default=argparse.SUPPRESS)
    parser.add_argument('-O', '--config-option',
                        help='Set configuration option specified by '
                             'Section.key=value with no space. For example, "Train.lr=1e-4"',
                        type=str, nargs='*', default=argparse.SUPPRESS)
    parser.add_argument('--no-preamble', action='store_true', help='Hide preamble', default=argparse.SUPPRESS)
    return parser


# defaults of the global options
GLOBAL_DEFAULTS = {'verbose': 20, 'config': None, 'seed': None, 'out_dir': '.', 'force': False,
                   'config_option': None, 'no_preamble': False}


def create_parser():
    """
    Create a parser for the command-line interface.

    Returns
    -------
    argparse.ArgumentParser
        Parser with all sideov options
    """
    common = _global_parser()
    parser = argparse.ArgumentParser(prog='sideov', parents=[common])

    sub_parsers = parser.add_subparsers(dest='command', help='[generate] synthetic dataset; '
                                                             '[train] pre-training; '
                                                             '[finetune-openset] open-set fine-tuning; '
                                                             '[finetune-grounding] grounding fine-tuning; '
                                                             '[eval] evaluation; '
                                                             '[detect] detect concepts in an image; '
                                                             '[report] ablation report; '
                                                             '[misc] misc. functions; '
                                                             '[selftest] run self test; '
                                        )

    gen = sub_parsers.add_parser('generate', parents=[common])
    gen.add_argument('-n', '--n-images', help='Number of images, Data.n_images by default', type=int)
    gen.add_argument('-o', '--out', help='Dataset directory, <out-dir>/dataset by default')

    train = sub_parsers.add_parser('train', parents=[common])
    train.add_argument('-d', '--dataset', help='Dataset directory', required=True)
    train.add_argument('-o', '--out', help='Checkpoint path, <out-dir>/pretrain.pt by default')
    train.add_argument('--resume', help='Partial checkpoint of the same phase to continue from')

    for name, default in (('finetune-openset', 'openset_ft.pt'), ('finetune-grounding', 'grounding_ft.pt')):
        ft = sub_parsers.add_parser(name, parents=[common])
        ft.add_argument('-k', '--checkpoint', help='Pre-trained checkpoint')
        ft.add_argument('-d', '--dataset', help='Dataset directory', required=True)
        ft.add_argument('-o', '--out', help=f'Checkpoint path, <out-dir>/{default} by default')
        ft.add_argument('--resume', help='Partial checkpoint of the same phase to continue from')

    ev = sub_parsers.add_parser('eval', parents=[common])
    ev.add_argument('-k', '--checkpoint', help='Checkpoint to evaluate', required=True)
    ev.add_argument('-d', '--dataset', help='Dataset directory', required=True)
    ev.add_argument('--vocab', help='Reported vocabulary split', choices=('seen', 'novel', 'all'), default='all')
    ev.add_argument('-m', '--mode', help='Proposal mode, RPN.mode by default', choices=PROPOSAL_MODES)
    ev.add_argument('--with-masks', help='Also compute mask AP', action='store_true')
    ev.add_argument('--zero-shot', help='Seen and novel AP with the shuffled-embedding baseline',
                    action='store_true')
    ev.add_argument('--metrics-out', help='Metrics JSON, <out-dir>/metrics.json by default')

    det = sub_parsers.add_parser('detect', parents=[common])
    det.add_argument('image', help='PNG image')
    det.add_argument('-k', '--checkpoint', help='Trained checkpoint', required=True)
    det.add_argument('-c', '--concepts', help='Concepts, space or comma separated', nargs='*', default=[])
    det.add_argument('--with-masks', help='Attach RLE masks', action='store_true')
    det.add_argument('--point', help='Point prompt X,Y; recognize the object under it')
    det.add_argument('-m', '--mode', help='Proposal mode, RPN.mode by default', choices=PROPOSAL_MODES)
    det.add_argument('-o', '--out', help='Detections JSON-lines, <out-dir>/<image>_det.jsonl by default')
    det.add_argument('--png', help='Annotated PNG output')

    rep = sub_parsers.add_parser('report', parents=[common])
    rep.add_argument('-d', '--dataset', help='Dataset directory', required=True)
    rep.add_argument('--baseline', help='Checkpoint of the baseline variant')
    rep.add_argument('--extractor', help='Checkpoint of the extractor-only variant')
    rep.add_argument('--full', help='Checkpoint of the full variant')
    rep.add_argument('-o', '--out', help='Report path stem, <out-dir>/ablation by default')
    rep.add_argument('--proposal-figure', help='Render RPN vs open-set proposals of this val image',
                     type=int, dest='proposal_figure_index')

    misc = sub_parsers.add_parser('misc', parents=[common])
    misc.add_argument('--save-config', help='save configuration to file name',
                      nargs='?', type=str, default='')
    misc.add_argument('-C', '--clean', help='Clean output files', action='store_true')
    misc.add_argument('-r', '--recursive', help='Recursively clean outputs (combined usage with --clean)',
                      action='store_true')
    misc.add_argument('--version', action='store_true', help='Display version information')

    st = sub_parsers.add_parser('selftest', aliases=command_aliases['selftest'], parents=[common])
    st.add_argument('--extra', help='Include the long training runs', action='store_true')

    return parser


def parse(argv=None):
    """
    Parse ``argv`` and fill in the global defaults.
    """
    parser = create_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    return parser, args


def preamble():
    """
    Log the sideov command-line preamble at the `logging.INFO` level
    """
    from sideov import __version__ as version

    py_version = platform.python_version()
    system_name = platform.system()
    date_time = strftime('%m/%d/%Y %I:%M:%S %p')
    logger.info("\n"
                rf"     _    _                  | Version {version}" + '\n'
                rf" ___(_)__| |___ _____ __     | Python {py_version} on {system_name}, {date_time}" + '\n'
                r"(_-< / _` / -_) _ \ V /     | " + "\n"
                r"/__/_\__,_\___\___/\_/      | This program comes with ABSOLUTELY NO WARRANTY." + '\n')


def main(argv=None):
    """
    Entry point of the sideov command-line interface.
    """

    parser, args = parse(argv)

    config_logger(stream=True,
                  stream_level=args.verbose,
                  file=True,
                  log_path=get_log_dir(),
                  )
    logger.debug(args)

    module = importlib.import_module('sideov.main')

    if args.command in quiet_commands or args.no_preamble is True:
        pass
    else:
        preamble()

    if args.command is None:
        parser.print_help()
        return 0

    cmd = args.command
    for fullcmd, aliases in command_aliases.items():
        if cmd in aliases:
            cmd = fullcmd

    func = getattr(module, cmd.replace('-', '_'))
    return func(cli=True, **vars(args))
