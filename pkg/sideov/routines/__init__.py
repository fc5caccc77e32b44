"""
Training and evaluation routines.
"""

from collections import OrderedDict
from andes.utils.func import list_flatten

all_routines = OrderedDict([
    ('train', ['Pretrain', 'OpensetFinetune', 'GroundingFinetune']),
    ('evaluate', ['Evaluate', 'ZeroShotEval', 'AblationReport']),
])

class_names = list_flatten(list(all_routines.values()))
routine_cli = OrderedDict([(item.lower(), item) for item in class_names])
