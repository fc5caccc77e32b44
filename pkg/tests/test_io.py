"""
Test dataset, checkpoint, JSON-lines and PNG input and output.
"""
import json
import os
import tempfile
import unittest
from collections import OrderedDict

import numpy as np
import torch

from sideov.core.config import RunConfig
from sideov.core.errors import CheckpointError, DataError
from sideov.data.synth import generate_dataset
from sideov.io.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sideov.io.dataset import load_dataset, save_dataset
from sideov.io.jsonl import read_jsonl, write_jsonl
from sideov.io.png import read_png, write_png


class TestDatasetIO(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'dataset')
        rc = RunConfig(default_config=True, options=['Data.n_images=6'])
        self.ds = generate_dataset(rc.Data, seed=3)
        self.assertTrue(save_dataset(self.ds, self.path))

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def _edit(self, name, func):
        fname = os.path.join(self.path, name)
        with open(fname, 'r') as f:
            obj = json.load(f)
        func(obj)
        with open(fname, 'w') as f:
            json.dump(obj, f)

    def test_round_trip(self):
        loaded = load_dataset(self.path)
        self.assertEqual(loaded.records, self.ds.records)
        self.assertEqual(loaded.vocab, self.ds.vocab)
        self.assertEqual(loaded.seed, 3)
        self.assertEqual(loaded.config, {'n_images': 6})

    def test_no_overwrite(self):
        self.assertFalse(save_dataset(self.ds, self.path))
        self.assertTrue(save_dataset(self.ds, self.path, overwrite=True))
        leftovers = [f for f in os.listdir(self.tmp.name) if f.startswith('.tmp')]
        self.assertEqual(leftovers, [])

    def test_missing_directory(self):
        with self.assertRaises(DataError):
            load_dataset(os.path.join(self.tmp.name, 'nowhere'))

    def test_truncated_json(self):
        fname = os.path.join(self.path, 'annotations.json')
        with open(fname, 'r') as f:
            text = f.read()
        with open(fname, 'w') as f:
            f.write(text[:len(text) // 2])
        with self.assertRaises(DataError):
            load_dataset(self.path)

    def test_missing_field(self):
        self._edit('annotations.json', lambda obj: obj['annotations'][2].pop('bbox'))
        with self.assertRaises(DataError) as cm:
            load_dataset(self.path)
        self.assertEqual(cm.exception.pointer, '/annotations/2/bbox')
        self.assertEqual(cm.exception.exit_code, 2)

    def test_box_outside(self):
        def shift(obj):
            obj['annotations'][0]['bbox'][0] = 500.0
        self._edit('annotations.json', shift)
        with self.assertRaises(DataError) as cm:
            load_dataset(self.path)
        self.assertEqual(cm.exception.pointer, '/annotations/0/bbox')

    def test_unknown_category(self):
        def unknown(obj):
            obj['annotations'][1]['category_id'] = 999
        self._edit('annotations.json', unknown)
        with self.assertRaises(DataError) as cm:
            load_dataset(self.path)
        self.assertEqual(cm.exception.pointer, '/annotations/1/category_id')

    def test_bad_span(self):
        def span(obj):
            obj[0]['spans'][0] = [0, 10000, 0]
        self._edit('captions.json', span)
        with self.assertRaises(DataError) as cm:
            load_dataset(self.path)
        self.assertEqual(cm.exception.pointer, '/captions/0/spans/0')

    def test_without_images(self):
        loaded = load_dataset(self.path, load_images=False)
        self.assertIsNone(loaded.records[0].image)
        self.assertEqual(loaded.records[0].annotations, self.ds.records[0].annotations)


class TestCheckpointIO(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'model.pt')
        rc = RunConfig(default_config=True)
        self.ckpt = Checkpoint(OrderedDict((('a.weight', torch.arange(6.0).reshape(2, 3)),
                                            ('b.bias', torch.zeros(3)))),
                               {'a.weight': True, 'b.bias': False},
                               rc.as_dict(), rc.hash(),
                               tags={'pretrain': True}, step=5, epoch=1,
                               curve=[{'iter': 0, 'loss': 1.5}])

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_round_trip(self):
        save_checkpoint(self.ckpt, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(list(loaded.tensors), ['a.weight', 'b.bias'])
        self.assertTrue(torch.equal(loaded.tensors['a.weight'], self.ckpt.tensors['a.weight']))
        self.assertEqual(loaded.frozen, self.ckpt.frozen)
        self.assertEqual(loaded.config_hash, self.ckpt.config_hash)
        self.assertEqual(RunConfig.from_dict(loaded.config).hash(), self.ckpt.config_hash)
        self.assertTrue(loaded.tagged('pretrain'))
        self.assertFalse(loaded.tagged('openset_ft'))
        self.assertEqual((loaded.step, loaded.epoch), (5, 1))
        self.assertEqual(loaded.curve, [{'iter': 0, 'loss': 1.5}])
        self.assertIsNone(loaded.optimizer)

    def test_missing(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_truncated(self):
        save_checkpoint(self.ckpt, self.path)
        with open(self.path, 'rb') as f:
            data = f.read()
        with open(self.path, 'wb') as f:
            f.write(data[:len(data) // 3])
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_foreign_file(self):
        torch.save({'weights': torch.zeros(2)}, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


class TestFiles(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_jsonl(self):
        path = os.path.join(self.tmp.name, 'out.jsonl')
        rows = [{'image_id': 1, 'score': 0.5}, {'image_id': 2, 'score': 0.25}]
        self.assertEqual(write_jsonl(path, rows), 2)
        self.assertEqual(read_jsonl(path), rows)

        with open(path, 'a') as f:
            f.write('{"image_id": 3,\n')
        with self.assertRaises(DataError):
            read_jsonl(path)

    def test_png(self):
        path = os.path.join(self.tmp.name, 'img.png')
        pixels = np.random.default_rng(0).integers(0, 256, size=(16, 24, 3), dtype=np.uint8)
        write_png(path, pixels)
        np.testing.assert_array_equal(read_png(path), pixels)
        with self.assertRaises(ValueError):
            write_png(path, pixels.astype(np.float64))

    def test_png_unreadable(self):
        with self.assertRaises(DataError):
            read_png(os.path.join(self.tmp.name, 'missing.png'))
        path = os.path.join(self.tmp.name, 'bad.png')
        with open(path, 'w') as f:
            f.write('not an image')
        with self.assertRaises(DataError):
            read_png(path)
