import setuptools


def get_version():
    with open("prunetape/__init__.py") as f:
        for line in f:
            if line.startswith("__version__"):
                return line.split("=")[1].strip().strip('"')


with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="prunetape",
    version=get_version(),
    description="Compression-aware training: differentiable FLOPs and latency costs over masked layers.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Intended Audience :: Science/Research",
    ],
    packages=setuptools.find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    python_requires=">=3.10.0",
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "peewee>=3.18.0",
    ],
    entry_points={"console_scripts": ["prunetape=prunetape.cli:main"]},
    package_data={"prunetape": ["py.typed"]},
    keywords="pruning, quantization, low-rank, latency, flops, sparsity",
)
