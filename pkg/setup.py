from setuptools import setup, find_packages

setup(
    name="pmisim",
    version="0.1.0",
    description="Multi-cell 5G downlink simulator with xApp-driven PMI control.",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.24",
        "pydantic>=2.0.0",
        "pyyaml",
    ],
    entry_points={"console_scripts": ["pmisim=pmisim.cli:main"]},
    python_requires=">=3.10",
)
