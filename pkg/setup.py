"""Setup for qecopt, quantum error-correction design by alternating semidefinite programs."""
from setuptools import setup, find_packages

setup(
    name='qecopt',
    version='0.1.0',
    description='Design quantum error-correcting encodings and recoveries by bi-convex semidefinite programming.',
    license='MIT',
    packages=find_packages(exclude=['tests']),
    package_data={'qecopt': ['numeric_policy.json', 'data/*.json']},
    python_requires='>=3.10',
    install_requires=[
        'numpy>=1.26',
        'click>=8.1',
        'pydantic>=2.10',
        'tabulate>=0.9.0',
    ],
    entry_points={
        'console_scripts': [
            'qecopt=qecopt.cli:main',
        ],
    },
    classifiers=[
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
    ]
)
