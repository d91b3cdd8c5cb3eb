import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Contraction into FMA would change rounding and break agreement with the
# pure-numpy fallback, so it is always disabled.
compile_args = ["-O3", "-ffp-contract=off"]
if os.environ.get("NEURON_ALLOC_NATIVE", "1") == "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "neuron_alloc._kernels",
        ["src/neuron_alloc/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
