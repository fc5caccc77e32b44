"""
Module for report generation: metrics files and ablation tables.
"""
import json
import logging
import os
from collections import OrderedDict
from time import strftime

from andes.utils.misc import elapsed

from sideov.shared import copyright_msg, pd
from sideov.utils.paths import atomic_write_text

logger = logging.getLogger(__name__)


def report_info(system) -> list:
    from sideov import __version__ as version

    info = list()
    info.append(f'sideov {version}')
    info.append(copyright_msg)
    info.append(f'Config hash: {system.config.hash()}')
    info.append(f'Seed: {system.seed}')
    return info


def metrics_dict(metrics, system=None, **extra):
    """
    JSON-ready dict of a mapping of EvalResults.

    Parameters
    ----------
    metrics : dict
        Name (``bbox``, ``segm``, ``seen``, ...) to EvalResult.
    system : System, optional
        Adds the config hash and seed.
    extra
        Additional top-level fields, e.g., the checkpoint path.
    """
    out = OrderedDict()
    if system is not None:
        out['config_hash'] = system.config.hash()
        out['seed'] = system.seed
    out.update(extra)
    out['metrics'] = OrderedDict((k, v.to_dict()) for k, v in metrics.items())
    return out


def write_metrics(path, metrics, system=None, **extra):
    """
    Write metrics as sorted, indented JSON.

    No timestamps are included so that equal runs give equal files.
    """
    text = json.dumps(metrics_dict(metrics, system, **extra), indent=2, sort_keys=True)
    atomic_write_text(path, text + '\n')
    logger.info('Metrics written to "%s".', path)
    return path


class Report:
    """
    Ablation report writer.

    Parameters
    ----------
    system : System
        The system whose config produced the report.
    """

    def __init__(self, system):
        self.system = system

    @property
    def info(self):
        return report_info(self.system)

    @staticmethod
    def fill(df):
        return df.astype(object).where(pd.notna(df), 'absent')

    def write(self, df, path):
        """
        Write ``df`` to ``<stem>.csv`` and ``<stem>.md``.

        Absent cells are written as ``absent``.

        Returns
        -------
        tuple of str
            The CSV and markdown paths.
        """
        t, _ = elapsed()
        stem, _ = os.path.splitext(path)
        csv_path, md_path = f'{stem}.csv', f'{stem}.md'
        table = self.fill(df)
        atomic_write_text(csv_path, table.to_csv(index=False))

        lines = [f'<!-- {line} -->' for line in self.info]
        lines.append(f'<!-- Report time: {strftime("%m/%d/%Y %I:%M:%S %p")} -->')
        lines.append('')
        lines.append(table.to_markdown(index=False))
        atomic_write_text(md_path, '\n'.join(lines) + '\n')

        _, s = elapsed(t)
        logger.info('Report saved to "%s" and "%s" in %s.', csv_path, md_path, s)
        return csv_path, md_path
