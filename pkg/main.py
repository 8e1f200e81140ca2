import sys
import uuid

from python_threadsafe_logger import sqlite_business_logger

from experiment_runner import run
from logger import logger

if __name__ == "__main__":
    session_guid = str(uuid.uuid4())
    logger.info(f"Starting session with GUID: {session_guid}")

    with sqlite_business_logger:
        sqlite_business_logger.log("__main__", f"Starting session with GUID: {session_guid}")
        status = run(sys.argv[1:])
        sqlite_business_logger.log("__main__", f"Stopping session with GUID: {session_guid} (exit {status})")

    sys.exit(status)
