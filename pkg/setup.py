from setuptools import find_namespace_packages, setup

with open("requirements.txt", encoding="utf-8") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("#") and "pytest" not in line]

setup(
    name="equidiff",
    version="0.1.0",
    description="Rotation-equivariant diffusion model for vehicle trajectory prediction",
    packages=find_namespace_packages(include=["src", "src.*"]),
    py_modules=["main"],
    install_requires=requirements,
    python_requires=">=3.9",
    entry_points={"console_scripts": ["equidiff=main:run"]},
)
