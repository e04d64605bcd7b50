"""Optional compiled tree kernels; the package works without them."""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("dorl.classifiers._trees", ["src/dorl/classifiers/_trees.pyx"],
                   extra_compile_args=["-O3", "-ffp-contract=off"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
