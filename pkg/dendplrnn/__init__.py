from .utils import utils
from .dynsys import systems, preprocessing
from .model import dendplrnn, checkpoint
from .training import optimizer, bptt
from .analysis import fixed_points, vector_field
from .metrics import measures
from .general import recipes, sweep, cli
