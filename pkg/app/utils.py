import hashlib
import inspect
import json
import logging
import os
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import aiofiles
import pandas as pd
from fastapi import Depends, HTTPException, Query
from fastapi.encoders import jsonable_encoder
from pydantic import ValidationError
from starlette.responses import JSONResponse

from app.config import ServerConfig
from app.errors import ConfigError
from app.models import RunConfig

logger = logging.getLogger("Utils")


class PaginationParams:
    def __init__(
        self,
        page: int = Query(1, ge=1, description="The page number for pagination"),
        limit: int = Query(
            20,
            ge=1,
            le=ServerConfig.MAX_PAGE_SIZE,
            description="Limit the number of rows per page",
        ),
    ):
        self.page = page
        self.limit = limit

    @property
    def offset(self):
        return (self.page - 1) * self.limit


async def save_to_json(data: Union[List[Any], Dict[str, Any]], filename: Path, indent: int = 0):
    """
    Save the given data to a JSON file, creating parent directories.
    :param data: The data to save.
    :param filename: The name of the file to save the data in.
    :param indent: The indent level of the JSON file.
    """
    try:
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        indent = indent if indent else None

        async with aiofiles.open(filename, "w") as outfile:
            await outfile.write(json.dumps(data, indent=indent))
            logger.info(f"Saved data to {filename}")
    except Exception as e:
        logger.error(f"Error saving JSON file {filename}: {str(e)}")
        raise


async def save_bytes(data: bytes, filename: Path):
    """
    Save a binary blob, creating parent directories.
    :param data: Raw bytes to write.
    :param filename: Destination path.
    """
    try:
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        async with aiofiles.open(filename, "wb") as outfile:
            await outfile.write(data)
        logger.info(f"Saved {len(data)} bytes to {filename}")
    except Exception as e:
        logger.error(f"Error saving binary file {filename}: {str(e)}")
        raise


def read_json(filename: Path) -> Any:
    with open(filename) as f:
        return json.loads(f.read())


def sha256_file(filename: Path) -> str:
    digest = hashlib.sha256()
    with open(filename, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_run_config(filename: Optional[Path]) -> RunConfig:
    """
    Parse a JSON run document; no file means all defaults.
    :param filename: Path of the JSON document, or None.
    :return: The validated RunConfig.
    :raises ConfigError: unreadable file, malformed JSON (with line/column) or invalid fields.
    """
    if filename is None:
        return RunConfig()
    try:
        with open(filename) as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config {filename}: {e.strerror}") from e

    try:
        document = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {filename} at line {e.lineno}, column {e.colno}: {e.msg}") from e

    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {filename}:\n{e}") from e


def dump_model(model) -> Dict[str, Any]:
    return model.model_dump(mode="json", by_alias=True)


def write_csv(rows: Sequence[Dict[str, Any]], columns: Sequence[str], filename: Path) -> Path:
    """
    Write rows as comma-separated CSV with a header row and LF line endings.
    :param rows: One dict per row; missing keys become empty cells.
    :param columns: Header order.
    :param filename: Destination path.
    """
    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(filename, index=False, lineterminator="\n")
    logger.info(f"Saved {len(frame)} rows to {filename}")
    return Path(filename)


def read_csv_records(filename: Path) -> List[Dict[str, Any]]:
    """Rows of a CSV as JSON-ready dicts, empty cells and NaN as None."""
    frame = pd.read_csv(filename)
    return json.loads(frame.to_json(orient="records", double_precision=15))


def paginate(func: Callable[..., List[Dict[str, Any]]]):
    """
    Decorator to paginate the list returned by an endpoint function.

    The wrapped function can be a coroutine (async function) or a regular function and receives
    the PaginationParams dependency as `pagination`.

    Paginated Response Structure:
        - has_more: Indicates if there are more pages of results beyond the current page.
        - total_pages: The total number of pages based on the limit.
        - current_page: The current page being served.
        - total_items: The total number of items in the result set.
        - data: The paginated data (subset of the original list).

    Example:
        >>> @paginate
        >>> async def get_rows():
        >>>     return [{"iteration": 100}, {"iteration": 200}]
    """

    @wraps(func)
    async def async_wrapper(*args, pagination: PaginationParams = Depends(), **kwargs):
        limit = pagination.limit
        offset = pagination.offset

        if inspect.iscoroutinefunction(func):
            results = await func(*args, **kwargs, pagination=pagination)
        else:
            results = func(*args, **kwargs, pagination=pagination)

        if not isinstance(results, list):
            raise HTTPException(status_code=500, detail="Results should be a list.")

        total_items = len(results)
        response_data = {
            "has_more": offset + limit < total_items,
            "total_pages": (total_items + limit - 1) // limit,
            "current_page": pagination.page,
            "total_items": total_items,
            "data": results[offset : offset + limit],
        }

        try:
            return JSONResponse(content=jsonable_encoder(response_data))
        except Exception as e:
            logger.error(f"Error generating JSON response: {e}")
            raise HTTPException(status_code=500, detail="Error generating JSON response")

    return async_wrapper
