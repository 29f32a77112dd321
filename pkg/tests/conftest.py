import sys
from pathlib import Path

import torch

# Make the sibling oracle helpers importable from any test module.
sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)
