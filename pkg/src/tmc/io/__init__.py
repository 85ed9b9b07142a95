from .datasets import (
    CsvSchema,
    DataError,
    Dataset,
    Standardizer,
    SyntheticParams,
    generate_synthetic,
    load_csv_dataset,
    train_test_split,
)

__all__ = [
    "CsvSchema", "DataError", "Dataset", "Standardizer", "SyntheticParams",
    "generate_synthetic", "load_csv_dataset", "train_test_split",
]
