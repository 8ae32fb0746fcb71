import os
from setuptools import setup


def version() -> str:
    with open(os.path.join(os.path.dirname(__file__), 'geonorm/_version.py')) as f:
        return f.read().split('=')[-1].strip().strip('"').strip("'")


def read_me() -> str:
    with open('README.md', 'r', encoding='utf-8') as f:
        return f.read()


setup(
    name="geonorm",
    version=version(),
    description="Geodesic normalization for transformers, with a numpy autodiff core and a toy-scale training harness.",
    long_description=read_me(),
    long_description_content_type='text/markdown',
    python_requires=">=3.8",
    license="MIT",
    packages=['geonorm'],
    install_requires=[
        "numpy",
        "tqdm",
        "more-itertools>=9.0",
    ],
    extras_require={
        "test": [
            "pytest",
            "hypothesis",
            "torch",
        ],
    },
    entry_points={
        "console_scripts": ["geonorm=geonorm.cli:cli"],
    },
    package_data={"geonorm": ["data/*.txt"]},
    include_package_data=False
)
