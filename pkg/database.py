"""
Engine and session management for the run ledger.

The ledger URL is resolved at call time:
  - SENTINEL_DATABASE_URL set → that URL (any SQLAlchemy backend)
  - Not set                   → SQLite file ``ledger.db`` inside the output directory

Usage
-----
::

    engine = create_ledger_engine(resolve_database_url(None, out_dir))
    init_db(engine)
    with session_scope(engine) as session:
        session.add(Run(...))
"""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from models import Base

logger = logging.getLogger(__name__)

LEDGER_FILENAME = "ledger.db"


def resolve_database_url(database_url: Optional[str], out_dir) -> str:
    """Explicit URL wins; otherwise an SQLite file in *out_dir*."""
    if database_url:
        return database_url
    path = Path(out_dir) / LEDGER_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{path.as_posix()}"


def create_ledger_engine(url: str) -> Engine:
    if url.startswith("sqlite"):
        return create_engine(url, connect_args={"check_same_thread": False})
    return create_engine(url, pool_pre_ping=True)


def init_db(engine: Engine) -> None:
    """Create any missing ledger tables. Safe to call repeatedly."""
    Base.metadata.create_all(bind=engine)


@contextmanager
def session_scope(engine: Engine) -> Iterator[Session]:
    """Session that commits on success and rolls back on any error."""
    factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    session = factory()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()
