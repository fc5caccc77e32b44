"""
Test the system container, the evaluation routines and the reports.
"""
import json
import os
import tempfile
import unittest

import pandas as pd

import sideov
from sideov.core.errors import ConfigError
from sideov.core.metrics import EvalResult
from sideov.models.rpn import ProposalMode
from sideov.report import Report, metrics_dict, write_metrics
from tests.test_training import tiny_system


class TestSystem(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.system = tiny_system()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_routines(self):
        self.assertEqual(list(self.system.routines),
                         ['Pretrain', 'OpensetFinetune', 'GroundingFinetune',
                          'Evaluate', 'ZeroShotEval', 'AblationReport'])
        self.assertIs(self.system.Evaluate, self.system.routines['Evaluate'])
        self.assertIs(self.system.Evaluate.system, self.system)
        self.assertIn('Zero-shot evaluation', self.system.supported_routines())

    def test_repr_summary(self):
        self.assertIn('seed=0', repr(self.system))
        out = self.system.summary()
        self.assertIn('Parameter partition', out)
        self.assertIn(self.system.config.hash()[:12], out)

    def test_bad_option(self):
        with self.assertRaises(ConfigError):
            tiny_system('Foundation.heads=3')

    def test_generate(self):
        ds = self.system.generate()
        self.assertEqual(len(ds.records), 6)
        self.assertEqual(len(ds.val), 1)
        self.assertEqual(ds.seed, 0)
        self.assertEqual(len(self.system.generate(n_images=2).records), 2)

    def test_from_checkpoint(self):
        path = os.path.join(self.tmp.name, 'init.pt')
        self.system.save_checkpoint(path, tags={'pretrain': True})
        system = sideov.System.from_checkpoint(path, seed=3)
        self.assertEqual(system.seed, 3)
        self.assertEqual(system.config.Foundation.dim, 16)
        self.assertTrue(system.checkpoint.tagged('pretrain'))
        self.assertEqual(system.model.frozen_checksum(), self.system.model.frozen_checksum())
        for name, tensor in self.system.model.state_dict().items():
            self.assertTrue(bool((system.model.state_dict()[name] == tensor).all()), name)

    def test_config_hash_mismatch(self):
        """
        Loading a checkpoint written under another config warns.
        """
        path = os.path.join(self.tmp.name, 'init.pt')
        self.system.save_checkpoint(path)
        other = tiny_system('Train.lr=1e-3')
        with self.assertLogs('sideov.system', level='WARNING') as cm:
            other.load_checkpoint(path)
        self.assertIn('differs from the run config', cm.output[0])
        self.assertIn(self.system.config.hash()[:12], cm.output[0])


class TestEvaluate(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls.system = tiny_system('Data.n_images=10')
        cls.dataset = cls.system.generate()

    def test_evaluate(self):
        metrics = self.system.Evaluate.run(dataset=self.dataset)
        self.assertEqual(list(metrics), ['bbox'])
        res = metrics['bbox']
        self.assertIsInstance(res, EvalResult)
        self.assertEqual(sorted(res.ar), [100, 1000])
        for v in (res.ap, res.ap50, res.ap75, *res.ar.values()):
            self.assertTrue(0.0 <= v <= 1.0)
        self.assertLessEqual(res.ar[100], res.ar[1000])
        self.assertEqual(self.system.Evaluate.exit_code, 0)

    def test_evaluate_masks(self):
        metrics = self.system.Evaluate.run(dataset=self.dataset, split='seen', mode=ProposalMode.OPEN_SET,
                                           with_masks=True)
        self.assertEqual(list(metrics), ['bbox', 'segm'])
        self.assertEqual(metrics['segm'].iou_type, 'segm')
        self.assertEqual(metrics['segm'].split, 'seen')
        self.assertTrue(set(metrics['bbox'].per_concept) <= set(self.dataset.vocab.seen))

    def test_open_set_recall(self):
        """
        Segmenter proposals recall at least as many objects as the RPN.
        """
        rpn = self.system.Evaluate.run(dataset=self.dataset, mode=ProposalMode.RPN_ONLY)['bbox']
        merged = self.system.Evaluate.run(dataset=self.dataset, mode=ProposalMode.OPEN_SET)['bbox']
        self.assertGreaterEqual(merged.ar[1000], rpn.ar[1000])

    def test_zero_shot(self):
        out = self.system.ZeroShotEval.run(dataset=self.dataset)
        self.assertEqual(list(out), ['seen', 'novel', 'novel_random'])
        self.assertEqual(out['novel'].split, 'novel')
        self.assertTrue(set(out['novel'].per_concept) <= set(self.dataset.vocab.novel))
        # proposals do not depend on the concept embeddings
        self.assertEqual(out['novel'].ar, out['novel_random'].ar)

    def test_shuffled_embeddings(self):
        concepts = self.dataset.vocab.all
        model = self.system.model
        f_t = model.concept_embeddings(concepts)
        shuffled = self.system.ZeroShotEval.shuffled_embeddings(concepts)
        self.assertEqual(tuple(shuffled.shape), tuple(f_t.shape))
        for i in range(len(concepts)):
            self.assertFalse(bool((shuffled[i] == f_t[i]).all()))

    def test_ablation(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'full.pt')
            self.system.save_checkpoint(path)
            df = self.system.AblationReport.run(
                dataset=self.dataset, modes=('rpn',),
                checkpoints={'full': path, 'extractor': os.path.join(tmp, 'missing.pt'), 'baseline': None})
        self.assertEqual(list(df['variant']), ['full', 'extractor', 'baseline'])
        self.assertEqual(list(df.columns), ['variant', 'AP_rpn', 'APs_rpn', 'AR@100_rpn', 'AR@1000_rpn'])
        self.assertIsNotNone(df.loc[0, 'AP_rpn'])
        self.assertTrue(pd.isna(df.loc[1, 'AP_rpn']))
        self.assertTrue(pd.isna(df.loc[2, 'AR@100_rpn']))


class TestReport(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.system = tiny_system()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_write_metrics(self):
        res = EvalResult(ap=0.5, ap50=0.75, ar={100: 0.25}, per_concept={'red circle': 0.5})
        path = os.path.join(self.tmp.name, 'metrics.json')
        write_metrics(path, {'bbox': res}, self.system, checkpoint='a.pt')
        with open(path) as f:
            text = f.read()
        data = json.loads(text)
        self.assertEqual(data['checkpoint'], 'a.pt')
        self.assertEqual(data['seed'], 0)
        self.assertEqual(data['config_hash'], self.system.config.hash())
        self.assertEqual(data['metrics']['bbox']['AR@100'], 0.25)
        self.assertEqual(text, json.dumps(data, indent=2, sort_keys=True) + '\n')

        # equal inputs give equal files
        again = os.path.join(self.tmp.name, 'again.json')
        write_metrics(again, {'bbox': res}, self.system, checkpoint='a.pt')
        with open(again) as f:
            self.assertEqual(f.read(), text)

    def test_metrics_dict(self):
        out = metrics_dict({'seen': EvalResult(split='seen')})
        self.assertNotIn('seed', out)
        self.assertEqual(out['metrics']['seen']['split'], 'seen')

    def test_write_table(self):
        df = pd.DataFrame([{'variant': 'full', 'AP_rpn': 12.5}, {'variant': 'baseline', 'AP_rpn': None}])
        csv_path, md_path = Report(self.system).write(df, os.path.join(self.tmp.name, 'ablation.csv'))
        self.assertTrue(csv_path.endswith('ablation.csv'))
        self.assertTrue(md_path.endswith('ablation.md'))

        table = pd.read_csv(csv_path)
        self.assertEqual(list(table['variant']), ['full', 'baseline'])
        self.assertEqual(list(table['AP_rpn']), ['12.5', 'absent'])
        with open(md_path) as f:
            md = f.read()
        self.assertIn('Config hash', md)
        self.assertIn('absent', md)
        self.assertIn('| variant', md)
