import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="deepcuts",
    version="0.1.0",
    description="Single-shot pruning of fine-tuned encoders with gradient and activation importance scores",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    python_requires=">=3.7",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    entry_points={"console_scripts": ["deepcuts=deepcuts.deepcuts:cli"]},
    install_requires=[
        "toml",
        "numpy",
        "scipy",
        "pandas",
        "tqdm",
        "click",
    ],
    extras_require={"test": ["pytest"]},
)
