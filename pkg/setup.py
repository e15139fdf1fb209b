from setuptools import setup

setup(
    name="small_corpus_mlm",
    version="0.1",
    package_dir={'': 'src'},
    py_modules=[
        'checkpoint', 'clean_text', 'config', 'corpus', 'data_process', 'errors',
        'evaluation', 'finetune', 'main', 'model', 'numerics', 'objectives',
        'optimizers', 'probing', 'sentence_scorer', 'tokenizer', 'training', 'writer',
    ],
    python_requires='>=3.10',
    entry_points={
        'console_scripts': [
            'mlm-lab = main:main',
        ],
    },
    install_requires=[
        'click>=8.1',
        'numpy>=1.26',
        'pandas>=2.0',
        'safetensors>=0.4',
        'scikit-learn>=1.3',
        'scipy>=1.11',
        'tokenizers>=0.15',
        'toml>=0.10',
        'torch>=2.1',
        'tqdm>=4.66',
    ],
    extras_require={
        'test': ['pytest>=7.4'],
    },
)
