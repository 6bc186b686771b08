"""Tools for processing handwritten census registers at scale.

Submodules:

* ``domain``      -- shared vocabulary: entity tags, page classes, records.
* ``label_codec`` -- page transcript <-> training-label string codec.
* ``household``   -- household grouping within and across pages.
* ``metrics``     -- CER/WER, entity P/R/F1, page-class confusion matrices.
* ``ingest``      -- CSV metadata ingestion and gazetteer matching.
* ``iiif``        -- IIIF Image API URLs and integrity checks.
* ``pipeline``    -- staged, manifest-driven batch processing.
* ``fixtures``    -- synthetic corpora for tests and demos.
* ``simulate``    -- discrete-event throughput simulation.
"""

__version__ = "0.1.0"
