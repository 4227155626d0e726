"""Deep Koopman-layered models: Fourier-lattice generators built from Toeplitz factors,
Krylov matrix-exponential actions, adjoint training, spectra and baselines."""

from .analysis import generalization_bound, generator_spectrum, layer_spectrum, transition_matrix
from .baselines import SnapshotPairs, edmd, kdmd
from .dynamics import TrajectoryDataset, generate_dataset, integrate, load_dataset, save_dataset
from .generator import GeneratorParams, ToeplitzFactor, apply_generator, assemble_dense, make_params
from .krylov import ExpmvConfig, dense_expm, expmv
from .lattice import IndexLattice, analyze, build_lattice, synthesize
from .model import DeepKoopmanModel, init_model, load_model, predict, predict_vector, save_model
from .training import Batch, TrainConfig, adam_train, gradient, loss

__version__ = "0.1.0"
