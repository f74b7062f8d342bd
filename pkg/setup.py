from setuptools import setup

setup(
    name="tomokit",
    version="0.3.0",
    package_dir={"": "src"},
    packages=["tomokit"],
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "tqdm>=4.60",
        "Pillow>=9.0.0",
    ],
    entry_points={
        "console_scripts": [
            "tomokit=tomokit.cli:main",
        ],
    },
)
