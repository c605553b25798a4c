from typing import List, Optional, Sequence, Tuple, Union

import torch

OptionalInt = Optional[int]
OptionalStr = Optional[str]
OptionalFloat = Optional[float]
Shape = Tuple[int, ...]
ShapeLike = Sequence[int]
# Per-voxel sampling layers (alpha, beta).
Perturbation = Tuple[torch.Tensor, torch.Tensor]
JsonType = Union[str, int, float, bool, None, list, dict]
SeedList = List[int]
