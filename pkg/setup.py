"""Setup script for the latent domain prompt fusion toolkit."""
from setuptools import setup

with open("requirements.txt", "r") as f:
    requirements = [line for line in f.read().splitlines() if line and not line.startswith("#")]

setup(
    name="latent-domain-prompt-fusion",
    version="1.0.0",
    description="Soft-prompt domain generalization with latent domain clustering and prompt fusion",
    py_modules=[
        "checkpoint",
        "config",
        "core",
        "data",
        "encoders",
        "experiments",
        "fusion",
        "latent_domain",
        "main",
        "oracle",
        "prompts",
        "training",
        "utils",
    ],
    install_requires=requirements,
    extras_require={
        # External CLIP backbone (ViT-B/16 weights are not downloaded automatically)
        "clip": ["open_clip_torch>=2.20.0", "Pillow>=10.0.0"],
    },
    entry_points={
        "console_scripts": [
            "ldpf=main:main",
        ],
    },
    python_requires=">=3.9",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
