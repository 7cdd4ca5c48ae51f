# Root build entry point; the package source lives in damage_inspection/damage_inspection.
from setuptools import setup

package_name = 'damage_inspection'

setup(
    name=package_name,
    version='0.1.0',
    packages=[package_name],
    package_dir={package_name: 'damage_inspection/damage_inspection'},
    install_requires=[
        'setuptools',
        'numpy',
        'scipy',
        'Pillow',
        'pandas',
        'matplotlib',
        'scikit-learn',
    ],
    python_requires='>=3.9',
    zip_safe=True,
    description='Post-earthquake UAV inspection pipeline: dataset tooling, staged model nodes, shallow damage classifiers and metrics',
    license='MIT',
    entry_points={
        'console_scripts': [
            'damage_inspection = damage_inspection.cli:main',
        ],
    },
)
