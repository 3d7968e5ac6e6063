import io

from setuptools import setup

long_description = io.open('README.md', encoding='utf-8').read()

setup(
    name='rewritehub',
    version='0.1.0',
    description='LLM-driven SQL query rewriting with a growing repository of natural-language rewrite rules',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    keywords='sql query rewrite llm optimizer postgresql benchmark',
    packages=['rewritehub'],
    package_dir={'': 'src'},  # https://stackoverflow.com/a/67238346/5494277
    include_package_data=True,
    python_requires='>=3.11',
    install_requires=io.open('requirements.txt', encoding='utf-8').read().splitlines(),
    extras_require={
        'dev': ['pytest>=7.4'],
    },
    entry_points={
        'console_scripts': [
            'rewritehub=rewritehub.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.11',
        'License :: OSI Approved :: MIT License',
        'Operating System :: Unix',
        'Topic :: Database',
        'Topic :: Software Development',
    ],
)
