"""Cost-sensitive sequential feature acquisition on the subset lattice."""

from .dataset import Dataset, FeatureGroup, load_builtin, load_csv
from .errors import AfaError, ConvergenceError, DataError, GraphError, SchemaError
from .mdp import FINISH, ROOT, PolicyGraph

__all__ = ["Dataset", "FeatureGroup", "load_builtin", "load_csv", "AfaError",
           "ConvergenceError", "DataError", "GraphError", "SchemaError", "FINISH",
           "ROOT", "PolicyGraph"]

__version__ = "0.1.0"
