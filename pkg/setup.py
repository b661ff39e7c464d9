from setuptools import setup, find_packages  # type: ignore


__version__ = '0.1.0'

with open('requirements.txt') as f_requirements:
    requirements = f_requirements.read().splitlines()

setup(
    name='causal-simulation',
    version=__version__,
    packages=find_packages(),
    entry_points={
        'console_scripts': ['csim=causal_simulation.cli:main']
    },
    include_package_data=True,
    install_requires=requirements,
    python_requires='>=3.8',
)
