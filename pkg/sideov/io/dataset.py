"""
COCO-like dataset directory reader and writer.

Layout::

    <path>/annotations.json   images, categories, annotations (bbox xywh, RLE)
    <path>/captions.json      one caption per image with phrase spans
    <path>/split.json         train/val image ids and seen/novel concepts
    <path>/images/*.png

The directory is assembled in a temporary sibling and renamed into place,
so an interrupted save never leaves a partial dataset.
"""

import json
import logging
import os
import shutil
import tempfile

from andes.utils.misc import elapsed

from sideov.core.errors import DataError
from sideov.core.geometry import Box, mask_to_rle, rle_to_mask
from sideov.data.records import Annotation, Caption, PhraseSpan, SampleRecord
from sideov.data.synth import SyntheticDataset
from sideov.data.vocab import VocabularySplit
from sideov.io.png import read_png, write_png

logger = logging.getLogger(__name__)

DATASET_FORMAT = 'sideov-dataset'
DATASET_VERSION = 1

FILES = ('annotations.json', 'captions.json', 'split.json')


def _dump(path, obj):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=1)


def to_coco(dataset: SyntheticDataset):
    """
    Return the three JSON documents of ``dataset``.
    """
    categories = [{'id': i + 1, 'name': name, 'split': dataset.vocab.split_of(name)}
                  for i, name in enumerate(dataset.vocab.all)]
    cat_id = {c['name']: c['id'] for c in categories}
    images, annotations, captions = [], [], []
    for rec in dataset.records:
        images.append({'id': rec.image_id, 'file_name': rec.file_name,
                       'height': rec.height, 'width': rec.width})
        for ann in rec.annotations:
            item = {'id': ann.id, 'image_id': rec.image_id, 'bbox': ann.box.to_xywh(),
                    'category_id': cat_id[ann.concept], 'area': ann.box.area}
            if ann.mask is not None:
                item['segmentation'] = mask_to_rle(ann.mask)
            annotations.append(item)
        if rec.caption is not None:
            captions.append({'image_id': rec.image_id, 'caption': rec.caption.text,
                             'spans': [[s.start, s.end, s.annotation_id] for s in rec.caption.spans]})
    info = {'format': DATASET_FORMAT, 'version': DATASET_VERSION, 'seed': dataset.seed}
    info.update(dataset.config)
    coco = {'info': info, 'images': images, 'categories': categories, 'annotations': annotations}
    split = {'train': [r.image_id for r in dataset.records if r.split == 'train'],
             'val': [r.image_id for r in dataset.records if r.split == 'val']}
    split.update(dataset.vocab.to_dict())
    return coco, captions, split


def save_dataset(dataset: SyntheticDataset, path, overwrite=False):
    """
    Write ``dataset`` to the directory ``path``.

    Returns
    -------
    bool
        True if written; False if ``path`` exists and ``overwrite`` is False.
    """
    path = os.path.abspath(path)
    if os.path.exists(path) and not overwrite:
        logger.warning('Dataset "%s" already exists, use --force to overwrite.', path)
        return False
    t0, _ = elapsed()
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix='.tmp-dataset-', dir=parent)
    try:
        os.makedirs(os.path.join(tmp, 'images'))
        for rec in dataset.records:
            write_png(os.path.join(tmp, 'images', rec.file_name), rec.image)
        coco, captions, split = to_coco(dataset)
        for name, obj in zip(FILES, (coco, captions, split)):
            _dump(os.path.join(tmp, name), obj)
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _, s = elapsed(t0)
    logger.info('Dataset with %d images written to "%s" in %s.', len(dataset.records), path, s)
    return True


def _load_json(path):
    if not os.path.isfile(path):
        raise DataError(f'Missing dataset file "{path}"')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f'Malformed JSON in "{os.path.basename(path)}": {e.msg} at char {e.pos}')


def _require(obj, key, typ, pointer):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f'Missing field <{key}>', f'{pointer}/{key}')
    value = obj[key]
    if typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, typ)
    if not ok:
        raise DataError(f'Field <{key}> must be {typ.__name__}', f'{pointer}/{key}')
    return value


def _parse_box(bbox, pointer):
    if not isinstance(bbox, list) or len(bbox) != 4 or \
            not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
        raise DataError('bbox must be a list of 4 numbers', pointer)
    try:
        return Box.from_xywh(bbox)
    except ValueError as e:
        raise DataError(str(e), pointer)


def _parse_mask(rle, height, width, pointer):
    if not isinstance(rle, dict) or 'size' not in rle or 'counts' not in rle:
        raise DataError('segmentation must hold size and counts', pointer)
    if list(rle['size']) != [height, width]:
        raise DataError(f'segmentation size {rle["size"]} differs from the image {[height, width]}',
                        f'{pointer}/size')
    try:
        return rle_to_mask(rle)
    except (ValueError, TypeError) as e:
        raise DataError(str(e), f'{pointer}/counts')


def from_coco(coco, captions, split):
    """
    Validate the three JSON documents and build records without pixels.

    Returns
    -------
    list of SampleRecord, VocabularySplit, dict
    """
    info = _require(coco, 'info', dict, '')
    if info.get('format') != DATASET_FORMAT:
        raise DataError(f'Unknown dataset format <{info.get("format")}>', '/info/format')
    if info.get('version') != DATASET_VERSION:
        raise DataError(f'Unsupported dataset version <{info.get("version")}>', '/info/version')
    vocab = VocabularySplit(list(_require(split, 'seen', list, '')), list(_require(split, 'novel', list, '')))

    categories = {}
    for i, cat in enumerate(_require(coco, 'categories', list, '')):
        cid = _require(cat, 'id', int, f'/categories/{i}')
        categories[cid] = _require(cat, 'name', str, f'/categories/{i}')

    records, by_id = [], {}
    for i, img in enumerate(_require(coco, 'images', list, '')):
        ptr = f'/images/{i}'
        rec = SampleRecord(_require(img, 'id', int, ptr), _require(img, 'file_name', str, ptr),
                           _require(img, 'height', int, ptr), _require(img, 'width', int, ptr))
        if rec.image_id in by_id:
            raise DataError(f'Duplicate image id {rec.image_id}', f'{ptr}/id')
        records.append(rec)
        by_id[rec.image_id] = rec

    for i, ann in enumerate(_require(coco, 'annotations', list, '')):
        ptr = f'/annotations/{i}'
        image_id = _require(ann, 'image_id', int, ptr)
        if image_id not in by_id:
            raise DataError(f'Unknown image id {image_id}', f'{ptr}/image_id')
        rec = by_id[image_id]
        cid = _require(ann, 'category_id', int, ptr)
        if cid not in categories:
            raise DataError(f'Unknown category id {cid}', f'{ptr}/category_id')
        box = _parse_box(_require(ann, 'bbox', list, ptr), f'{ptr}/bbox')
        if box.x1 < 0 or box.y1 < 0 or box.x2 > rec.width or box.y2 > rec.height:
            raise DataError(f'bbox {ann["bbox"]} leaves the image', f'{ptr}/bbox')
        mask = None
        if 'segmentation' in ann:
            mask = _parse_mask(ann['segmentation'], rec.height, rec.width, f'{ptr}/segmentation')
        rec.annotations.append(Annotation(_require(ann, 'id', int, ptr), box, categories[cid], mask))

    if not isinstance(captions, list):
        raise DataError('captions.json must hold a list')
    for i, cap in enumerate(captions):
        ptr = f'/captions/{i}'
        image_id = _require(cap, 'image_id', int, ptr)
        if image_id not in by_id:
            raise DataError(f'Unknown image id {image_id}', f'{ptr}/image_id')
        text = _require(cap, 'caption', str, ptr)
        spans = []
        for j, span in enumerate(_require(cap, 'spans', list, ptr)):
            if not isinstance(span, list) or len(span) != 3 or not all(isinstance(v, int) for v in span):
                raise DataError('span must be [start, end, annotation_id]', f'{ptr}/spans/{j}')
            if not 0 <= span[0] < span[1] <= len(text):
                raise DataError(f'span {span} outside the caption', f'{ptr}/spans/{j}')
            spans.append(PhraseSpan(*span))
        by_id[image_id].caption = Caption(text, spans)

    for name in ('train', 'val'):
        for i, image_id in enumerate(_require(split, name, list, '')):
            if image_id not in by_id:
                raise DataError(f'Unknown image id {image_id}', f'/{name}/{i}')
            by_id[image_id].split = name
    return records, vocab, info


def load_dataset(path, load_images=True):
    """
    Load a dataset directory written by :func:`save_dataset`.

    Raises
    ------
    DataError
        On any schema violation, with a JSON pointer into the offending file.
        Nothing is returned in that case.
    """
    if not os.path.isdir(path):
        raise DataError(f'Dataset directory "{path}" not found')
    docs = [_load_json(os.path.join(path, name)) for name in FILES]
    records, vocab, info = from_coco(*docs)
    if load_images:
        for rec in records:
            pixels = read_png(os.path.join(path, 'images', rec.file_name))
            if pixels.shape[:2] != (rec.height, rec.width):
                raise DataError(f'Image "{rec.file_name}" is {pixels.shape[:2]}, expected '
                                f'{(rec.height, rec.width)}')
            rec.image = pixels
    extra = {k: v for k, v in info.items() if k not in ('format', 'version', 'seed')}
    logger.debug('Loaded %d images from "%s".', len(records), path)
    return SyntheticDataset(records, vocab, int(info.get('seed', 0)), extra)
