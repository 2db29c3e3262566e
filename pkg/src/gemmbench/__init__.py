"""Benchmark harness for single-precision square matrix multiplication kernels."""

from gemmbench.kernels import KernelSpec, kernel_registry
from gemmbench.matrix import Matrix, Matrix64, fill_random, matrix_new, mse, serial_gemm_ref, serial_gemm_ref64
from gemmbench.measure import Measurement, RunConfig, TimingStats, aggregate, run_sweep, time_kernel

__version__ = "0.1.0"
