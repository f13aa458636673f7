import sys
from pathlib import Path

import torch

# Tiny tensors: a single thread is both faster and reproducibly ordered.
torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))
