"""
Run configuration: one ``andes.core.Config`` section per component.

Values are resolved from, in increasing precedence, the defaults below,
an rc file in INI syntax, ``Section.key=value`` overrides and the
``--seed`` flag.
"""

import configparser
import hashlib
import json
import logging
from collections import OrderedDict

from andes.core import Config
from andes.system import load_config_rc

from sideov.core.errors import ConfigError
from sideov.utils.paths import atomic_path, get_config_path

logger = logging.getLogger(__name__)


# Each entry: section name -> (defaults, help, alternatives).
# ``_alt`` tuples are the accepted choices; strings document the range.
config_sections = OrderedDict()

config_sections['System'] = (
    OrderedDict((('seed', 0),
                 ('dtype', 'float32'),
                 ('num_threads', 1),
                 ('deterministic', 1),
                 )),
    {'seed': 'global seed, all randomness derives from it',
     'dtype': 'floating point precision of trainable modules',
     'num_threads': 'torch intra-op threads',
     'deterministic': 'use deterministic torch algorithms',
     },
    {'seed': 'int',
     'dtype': ('float32', 'float64'),
     'num_threads': '>=1',
     'deterministic': (0, 1),
     },
)

config_sections['Data'] = (
    OrderedDict((('n_images', 2000),
                 ('image_size', 128),
                 ('shapes', 'circle,square,triangle,diamond'),
                 ('colors', 'red,green,blue,yellow'),
                 ('novel', 'red circle,green square,blue triangle,yellow diamond'),
                 ('min_objects', 1),
                 ('max_objects', 5),
                 ('min_size', 12),
                 ('max_size', 32),
                 ('max_overlap', 0.3),
                 ('background', 0.5),
                 ('noise', 0.03),
                 ('val_fraction', 0.2),
                 ('placement_tries', 100),
                 ('n_templates', 8),
                 ('concept_budget', 150),
                 )),
    {'n_images': 'number of generated images',
     'image_size': 'square image side in pixels, multiple of 16',
     'shapes': 'comma-separated shape names',
     'colors': 'comma-separated color names',
     'novel': 'comma-separated held-out "color shape" concepts',
     'min_objects': 'minimum objects per image',
     'max_objects': 'maximum objects per image',
     'min_size': 'minimum shape extent in pixels',
     'max_size': 'maximum shape extent in pixels',
     'max_overlap': 'maximum pairwise box IoU of placed shapes',
     'background': 'gray level of the background',
     'noise': 'amplitude of the uniform background texture',
     'val_fraction': 'fraction of images in the val split',
     'placement_tries': 'rejection samples per shape before regenerating',
     'n_templates': 'prompt templates per concept',
     'concept_budget': 'concepts per grounding batch',
     },
    {'image_size': '>0, multiple of 16',
     'val_fraction': '[0, 1)',
     'max_overlap': '(0, 1]',
     },
)

config_sections['Foundation'] = (
    OrderedDict((('dim', 64),
                 ('patch', 16),
                 ('sam_layers', 8),
                 ('heads', 8),
                 ('tau', 0.08),
                 ('text_mix', 0.3),
                 )),
    {'dim': 'feature width D shared by all stubs',
     'patch': 'patch size of the encoders',
     'sam_layers': 'layers of the segmentation encoder stub, 4 blocks',
     'heads': 'attention heads of the encoder stub',
     'tau': 'flood-fill color tolerance of the segmenter stub',
     'text_mix': 'weight of the template-specific word vectors',
     },
    {'patch': (16,),
     'sam_layers': (4, 8, 12, 16),
     },
)

config_sections['SideFormer'] = (
    OrderedDict((('variant', 'full'),
                 ('attention', 'dense'),
                 ('heads', 8),
                 ('points', 4),
                 ('ffn_ratio', 4),
                 ('injector_gate', 'cross'),
                 )),
    {'variant': 'baseline (SAM features only), extractor, or full',
     'attention': 'dense or deformable attention',
     'heads': 'attention heads',
     'points': 'sampling points per head for deformable attention',
     'ffn_ratio': 'FFN hidden width over D',
     'injector_gate': 'gate only the cross-attention or all injector residuals',
     },
    {'variant': ('baseline', 'extractor', 'full'),
     'attention': ('dense', 'deformable'),
     'injector_gate': ('cross', 'all'),
     },
)

config_sections['RPN'] = (
    OrderedDict((('anchor_sizes', '12,20,32,48,64,96'),
                 ('pre_nms_k', 1000),
                 ('post_nms_k', 300),
                 ('nms_thr', 0.7),
                 ('pos_iou', 0.7),
                 ('neg_iou', 0.3),
                 ('batch_per_image', 256),
                 ('pos_fraction', 0.5),
                 ('mode', 'rpn'),
                 ('grid_n', 32),
                 ('seg_grid_n', 64),
                 ('seg_nms_thr', 0.95),
                 ('min_area', 16),
                 ('max_area_frac', 0.9),
                 ('merge_threshold', 0.7),
                 )),
    {'anchor_sizes': 'square anchor sides, 3 per level for 2 levels',
     'pre_nms_k': 'top anchors kept before NMS',
     'post_nms_k': 'proposals kept after NMS',
     'nms_thr': 'RPN NMS IoU threshold',
     'pos_iou': 'anchor positive IoU',
     'neg_iou': 'anchor negative IoU',
     'batch_per_image': 'sampled anchors per image',
     'pos_fraction': 'positive share of sampled anchors',
     'mode': 'proposal mode rpn, seg or open',
     'grid_n': 'segmenter point grid for open-set proposals',
     'seg_grid_n': 'segmenter point grid for segmenter-only proposals',
     'seg_nms_thr': 'NMS threshold of segmenter-only proposals',
     'min_area': 'minimum mask pixels of a segmenter proposal',
     'max_area_frac': 'maximum box area fraction of a segmenter proposal',
     'merge_threshold': 'reference-based NMS threshold of open-set fusion',
     },
    {'mode': ('rpn', 'seg', 'open'),
     'max_area_frac': '(0, 1]',
     },
)

config_sections['ROIHead'] = (
    OrderedDict((('out_size', 7),
                 ('stages', 3),
                 ('stage_ious', '0.5,0.6,0.7'),
                 ('rois_per_image', 128),
                 ('pos_fraction', 0.25),
                 ('hidden', 256),
                 ('logit_scale', 14.0),
                 ('scale_min', 1.0),
                 ('scale_max', 100.0),
                 ('prior_prob', 0.01),
                 ('focal_alpha', 0.25),
                 ('focal_gamma', 2.0),
                 ('test_nms', 0.5),
                 ('max_dets', 100),
                 ('score_thr', 0.05),
                 ('embed_source', 'last'),
                 )),
    {'out_size': 'ROI align output size',
     'stages': 'cascade stages',
     'stage_ious': 'positive IoU per cascade stage',
     'rois_per_image': 'sampled ROIs per image',
     'pos_fraction': 'positive share of sampled ROIs',
     'hidden': 'width of the box head trunk',
     'logit_scale': 'initial inverse temperature',
     'scale_min': 'lower clamp of the inverse temperature',
     'scale_max': 'upper clamp of the inverse temperature',
     'prior_prob': 'initial concept probability of the similarity bias',
     'focal_alpha': 'focal loss alpha',
     'focal_gamma': 'focal loss gamma',
     'test_nms': 'class-agnostic NMS at inference',
     'max_dets': 'detections kept per image',
     'score_thr': 'minimum detection score',
     'embed_source': 'region embedding from the last stage or the stage mean',
     },
    {'stages': '>=1',
     'embed_source': ('last', 'mean'),
     },
)

config_sections['Train'] = (
    OrderedDict((('lr', 4e-4),
                 ('weight_decay', 0.05),
                 ('epochs', 12),
                 ('batch_size', 16),
                 ('warmup_iters', 100),
                 ('schedule', 'cosine'),
                 ('clip_norm', 10.0),
                 ('w_rpn_cls', 1.0),
                 ('w_rpn_reg', 1.0),
                 ('w_align', 1.0),
                 ('w_reg', 1.0),
                 ('ft_lr_ratio', 0.1),
                 ('ft_epochs', 1),
                 ('ft_grid_n', 32),
                 ('subset_frac', 0.2),
                 ('grounding_epochs', 3),
                 ('grounding_lr', 4e-4),
                 ('flip', 1),
                 ('log_every', 10),
                 ('max_iters', 0),
                 )),
    {'lr': 'AdamW learning rate of pre-training',
     'weight_decay': 'AdamW weight decay',
     'epochs': 'pre-training epochs',
     'batch_size': 'images per batch',
     'warmup_iters': 'linear warmup iterations from lr/1000',
     'schedule': 'learning rate decay after warmup',
     'clip_norm': 'global gradient norm clip',
     'w_rpn_cls': 'weight of RPN objectness loss',
     'w_rpn_reg': 'weight of RPN box loss',
     'w_align': 'weight of word-region alignment loss',
     'w_reg': 'weight of cascade box loss per stage',
     'ft_lr_ratio': 'open-set fine-tune lr over pre-train lr',
     'ft_epochs': 'open-set fine-tune epochs',
     'ft_grid_n': 'segmenter grid of open-set fine-tuning',
     'subset_frac': 'training subset of open-set fine-tuning',
     'grounding_epochs': 'grounding fine-tune epochs',
     'grounding_lr': 'grounding fine-tune learning rate',
     'flip': 'random horizontal flip augmentation',
     'log_every': 'iterations between INFO log lines',
     'max_iters': 'stop after this many iterations, 0 for no limit',
     },
    {'lr': '>0',
     'schedule': ('cosine', 'constant'),
     'flip': (0, 1),
     },
)

config_sections['Eval'] = (
    OrderedDict((('iou_lo', 0.5),
                 ('iou_hi', 0.95),
                 ('iou_n', 10),
                 ('ar_k', '100,1000'),
                 ('small_area', 144),
                 ('medium_area', 1600),
                 ('max_dets', 100),
                 )),
    {'iou_lo': 'lowest IoU threshold',
     'iou_hi': 'highest IoU threshold',
     'iou_n': 'number of IoU thresholds',
     'ar_k': 'proposal budgets of average recall',
     'small_area': 'upper area of small objects',
     'medium_area': 'upper area of medium objects',
     'max_dets': 'detections per image considered',
     },
    {},
)


def _coerce(default, value, key):
    """
    Convert ``value`` to the type of ``default``.
    """
    if isinstance(default, bool) or isinstance(default, int):
        try:
            fval = float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f'Config <{key}> expects an integer, got <{value}>')
        if not fval.is_integer():
            raise ConfigError(key, f'Config <{key}> expects an integer, got <{value}>')
        return int(fval)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f'Config <{key}> expects a number, got <{value}>')
    return str(value).strip()


class RunConfig:
    """
    Merged run configuration.

    Parameters
    ----------
    config_path : str, optional
        rc file to load. When None, ``./sideov.rc`` and then
        ``~/.sideov/sideov.rc`` are searched.
    default_config : bool, optional
        True to ignore any rc file.
    options : list of str, optional
        ``Section.key=value`` overrides.
    seed : int, optional
        Overrides ``System.seed``.
    config : dict, optional
        Nested ``{section: {key: value}}`` overrides applied before
        ``options``.

    Attributes
    ----------
    sections : OrderedDict
        Section name to ``andes.core.Config``.
    """

    def __init__(self, config_path=None, default_config=False,
                 options=None, seed=None, config=None):
        self._config_path = config_path
        if config_path is None and not default_config:
            self._config_path = get_config_path()
        if default_config:
            self._config_path = None

        rc = None
        if self._config_path is not None:
            rc = load_config_rc(self._config_path)
            if rc is None:
                raise ConfigError('--config', f'Cannot read config file "{self._config_path}"')
            logger.debug('Loaded config from "%s".', self._config_path)

        self.sections = OrderedDict()
        for name, (defaults, helps, alts) in config_sections.items():
            cfg = Config(name)
            cfg.load(rc)
            cfg.add(OrderedDict(defaults))
            cfg.add_extra('_help', helps)
            cfg.add_extra('_alt', alts)
            self.sections[name] = cfg
            setattr(self, name, cfg)

        if rc is not None:
            self._check_rc(rc)
        for key, default in self._iter_defaults():
            section, field = key.split('.')
            cfg = self.sections[section]
            setattr(cfg, field, _coerce(default, getattr(cfg, field), key))

        if config is not None:
            for section, dct in config.items():
                for field, value in dct.items():
                    self.set(f'{section}.{field}', value)
        if options:
            self.update_options(options)
        if seed is not None:
            self.set('System.seed', seed)

        self.validate()

    @staticmethod
    def _iter_defaults():
        for section, (defaults, _, _) in config_sections.items():
            for field, value in defaults.items():
                yield f'{section}.{field}', value

    def _check_rc(self, rc):
        for section in rc.sections():
            if section not in config_sections:
                raise ConfigError(section, f'Unknown config section <{section}> in "{self._config_path}"')
            defaults = config_sections[section][0]
            for field in rc[section]:
                if field not in defaults:
                    raise ConfigError(f'{section}.{field}', f'Unknown config key <{section}.{field}>')

    def set(self, key, value):
        """
        Set ``Section.key`` to ``value``, converted to the default's type.
        """
        if key.count('.') != 1:
            raise ConfigError(key, f'Config key <{key}> must read Section.key')
        section, field = key.split('.')
        if section not in config_sections or field not in config_sections[section][0]:
            raise ConfigError(key)
        default = config_sections[section][0][field]
        setattr(self.sections[section], field, _coerce(default, value, key))

    def update_options(self, options):
        """
        Apply a list of ``Section.key=value`` strings.
        """
        for item in options:
            if '=' not in item:
                raise ConfigError(item, f'Config option <{item}> must read Section.key=value')
            key, value = item.split('=', 1)
            self.set(key.strip(), value.strip())
            logger.debug('Config option %s set to %s.', key, value)

    def validate(self):
        """
        Check choices and ranges; raise ConfigError on the first violation.
        """
        for section, (defaults, _, alts) in config_sections.items():
            cfg = self.sections[section]
            for field, alt in alts.items():
                if isinstance(alt, tuple) and getattr(cfg, field) not in alt:
                    raise ConfigError(f'{section}.{field}',
                                      f'Config <{section}.{field}={getattr(cfg, field)}> not in {alt}')
            cfg.as_dict(refresh=True)
            cfg.check()

        if self.Data.image_size % 16 != 0 or self.Data.image_size <= 0:
            raise ConfigError('Data.image_size', 'Data.image_size must be a positive multiple of 16')
        if not 0.0 <= self.Data.val_fraction < 1.0:
            raise ConfigError('Data.val_fraction', 'Data.val_fraction must be in [0, 1)')
        if self.Data.min_objects < 1 or self.Data.max_objects < self.Data.min_objects:
            raise ConfigError('Data.max_objects', 'Data objects per image must satisfy 1 <= min <= max')
        if self.Data.n_templates < 1:
            raise ConfigError('Data.n_templates', 'Data.n_templates must be positive')
        if self.Train.lr <= 0:
            raise ConfigError('Train.lr', 'Train.lr must be positive')
        if self.ROIHead.stages < 1:
            raise ConfigError('ROIHead.stages', 'ROIHead.stages must be at least 1')
        if len(self.ROIHead.stage_ious.split(',')) < self.ROIHead.stages:
            raise ConfigError('ROIHead.stage_ious', 'ROIHead.stage_ious needs one IoU per stage')
        if len(self.RPN.anchor_sizes.split(',')) != 6:
            raise ConfigError('RPN.anchor_sizes', 'RPN.anchor_sizes needs 3 sizes for each of 2 levels')
        if self.Foundation.dim % self.Foundation.heads != 0 or self.Foundation.dim % self.SideFormer.heads != 0:
            raise ConfigError('Foundation.dim', 'Foundation.dim must be divisible by the attention heads')
        for key in ('RPN.nms_thr', 'RPN.merge_threshold', 'RPN.seg_nms_thr', 'ROIHead.test_nms'):
            section, field = key.split('.')
            if not 0.0 < getattr(self.sections[section], field) <= 1.0:
                raise ConfigError(key, f'{key} must be in (0, 1]')

    def as_dict(self):
        """
        Return ``{section: {key: value}}`` of the current values.
        """
        out = OrderedDict()
        for name, cfg in self.sections.items():
            out[name] = OrderedDict((k, getattr(cfg, k)) for k in config_sections[name][0])
        return out

    def hash(self):
        """
        SHA-256 of the canonical JSON of all sections.
        """
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    @property
    def seed(self):
        return self.System.seed

    def save(self, path):
        """
        Write all sections to an rc file with help comments.
        """
        cp = configparser.ConfigParser(allow_no_value=True)
        cp.optionxform = str
        for name, (defaults, helps, _) in config_sections.items():
            cp.add_section(name)
            for field in defaults:
                if field in helps:
                    cp.set(name, f'# {helps[field]}', None)
                cp.set(name, field, str(getattr(self.sections[name], field)))
        with atomic_path(path, suffix='.rc') as tmp:
            with open(tmp, 'w', encoding='utf-8') as f:
                cp.write(f)
        logger.info('Config written to "%s".', path)
        return path

    @classmethod
    def from_dict(cls, dct):
        """
        Rebuild a config stored in a checkpoint, ignoring any rc file.
        """
        return cls(default_config=True, config=dct)

    def __repr__(self):
        return f'RunConfig(hash={self.hash()[:12]})'
