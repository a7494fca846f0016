from setuptools import setup, find_packages

setup(
    name="sams-vae",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy",
        "scipy",
        "pandas",
        "python-dotenv",
        "colorama",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "sams-vae=pipeline.run:main",
        ],
    },
    python_requires=">=3.9",
)
