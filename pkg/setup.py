"""Build hooks: compiles the optional GMP-backed counting core.

If GMP headers or a C compiler are missing the build proceeds without the
extension and the package falls back to the pure-Python engine.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler / gmp.h
            print(f"warning: skipping C extension build ({exc}); "
                  "using pure-Python counting engine")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); "
                  "using pure-Python counting engine")


setup(
    ext_modules=[
        Extension(
            "qwalks._fastwalk",
            sources=["src/qwalks/_fastwalk.c"],
            libraries=["gmp", "pthread"],
            extra_compile_args=["-O3"],
            optional=True,
        )
    ],
    cmdclass={"build_ext": OptionalBuildExt},
)
