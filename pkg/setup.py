import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NSFCHAIN_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("nsfchain.netsim._pipeline", ["src/nsfchain/netsim/_pipeline.pyx"])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        # no Cython: the pure-Python kernel is used at import time
        pass

setup(ext_modules=ext_modules)
