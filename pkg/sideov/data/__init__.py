from sideov.data.records import Annotation, Caption, PhraseSpan, SampleRecord  # NOQA
from sideov.data.vocab import (ConceptEmbedder, ConceptMode, ConceptSet,  # NOQA
                               VocabularySplit, build_vocabulary, concept_pool)
from sideov.data.synth import SyntheticDataset, generate_dataset  # NOQA
from sideov.data.batch import Batch, detection_batch, grounding_batch  # NOQA
