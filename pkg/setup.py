import ast
import re

from setuptools import find_packages, setup

_version_re = re.compile(r"__version__\s+=\s+(.*)")

with open("cpclab/__init__.py", "rb") as f:
    version = str(
        ast.literal_eval(_version_re.search(f.read().decode("utf-8")).group(1))
    )

requirements = [
    "numpy>=1.22",
    # log_expit and kstwobign
    "scipy>=1.8",
    "pydantic>=2.0,<3",
    "PyYAML>=6.0",
    "pandas>=1.5",
]

tests_require = [
    "pytest>=7.0",
    "pytest-cov>=3.0",
    "pytest-benchmark>=3.4.0",
    "hypothesis>=6.0",
]

setup(
    name="cpclab",
    version=version,
    description="Desk-scale lab for noisy-label cleaners: DivideMix with GMM and class prototype cleaners",
    long_description=open("README.rst").read(),
    license="MIT",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    keywords="noisy labels label noise dividemix gmm prototypes semi-supervised",
    packages=find_packages(exclude=["tests"]),
    install_requires=requirements,
    extras_require={
        "dev": [
            "tox==3.7.0",  # Should be kept in sync with tox.ini
            "pre-commit==2.19",
            "flake8==4.0.0",
        ],
        "test": tests_require,
    },
    tests_require=tests_require,
    entry_points={"console_scripts": ["cpclab=cpclab.cli:main"]},
)
