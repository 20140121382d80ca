"""Flow-synchronized GC-MS screening across river monitoring sites.

Modules: ``chromio`` (sample and table I/O), ``flowsync`` (volume matching),
``preprocess`` (gridding, AsLS, COW), ``parafac2`` (windowed deconvolution),
``pathmodel`` (Process PLS), ``specmatch`` (library annotation), ``synthgen``
(synthetic scenarios) and ``pipeline``/``cli`` (orchestration).
"""

__version__ = "0.1.0"
