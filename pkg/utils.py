import os
import json
import pandas as pd
from typing import Dict, Any


def ensure_directories(*paths: str):
    """Ensure all required directories exist."""
    for path in paths or ("output",):
        os.makedirs(path, exist_ok=True)


def save_dataframe_to_csv(df: pd.DataFrame, filepath: str):
    """
    Save a pandas DataFrame to a CSV file.

    Args:
        df: DataFrame to save
        filepath: Path to save the CSV file
    """
    df.to_csv(filepath, index=False, encoding='utf-8', lineterminator='\n')


def save_json(data: Dict[str, Any], filepath: str):
    """Write a JSON document with sorted keys."""
    with open(filepath, 'w', encoding='utf-8') as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write('\n')
