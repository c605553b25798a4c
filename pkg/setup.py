#!/usr/bin/env python

import setuptools

application_dependencies = ["torch>=2.0", "numpy>=1.22", "scipy>=1.8", "tenacity>=8.0"]
prod_dependencies = []
test_dependencies = ["pytest", "pytest-env", "pytest-cov"]
lint_dependencies = ["flake8", "flake8-docstrings", "black", "isort"]
docs_dependencies = []
dev_dependencies = test_dependencies + lint_dependencies + docs_dependencies + ["ipdb"]


with open("README.md", "r") as fh:
    long_description = fh.read()


with open("VERSION", "r") as buf:
    version = buf.read().strip()


setuptools.setup(
    name="atlas-aug",
    version=version,
    description="One-shot atlas segmentation with registration-driven adversarial augmentation.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    python_requires=">=3.8",
    packages=["atlasaug", "atlasaug.utils"],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Programming Language :: Python :: 3.8",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
    install_requires=application_dependencies,
    extras_require={
        "production": prod_dependencies,
        "test": test_dependencies,
        "lint": lint_dependencies,
        "docs": dev_dependencies,
        "dev": dev_dependencies,
    },
    entry_points={"console_scripts": ["atlasaug = atlasaug.cli:main"]},
    include_package_data=True,
    zip_safe=False,
)
