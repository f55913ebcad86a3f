"""
SQLAlchemy ORM models for the sentinel run ledger.

Tables
------
runs           : one row per CLI command invocation, with its manifest
trials         : random-search trials linked to the run that produced them
attack_records : per-sample outcomes of the feature-space attack
"""

from datetime import datetime

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    """
    A single command invocation.

    Columns
    -------
    id          : primary key
    command     : CLI sub-command name ('train', 'pipeline', ...)
    config_hash : SHA-256 of the canonical experiment configuration
    seed        : global seed the component seeds were derived from
    out_dir     : run directory holding the artifacts
    exit_code   : process exit code the command returned
    manifest    : JSON manifest written next to the artifacts
    created_at  : UTC timestamp of the invocation (ledger only, never in artifacts)
    """

    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String, nullable=False)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    out_dir = Column(String, nullable=False)
    exit_code = Column(Integer, default=0)
    manifest = Column(Text)

    created_at = Column(DateTime, default=datetime.utcnow)

    trials = relationship("Trial", back_populates="run", cascade="all, delete-orphan")
    attack_records = relationship("AttackRecordRow", back_populates="run", cascade="all, delete-orphan")


class Trial(Base):
    """
    One random-search trial.

    Columns
    -------
    stage     : 'architecture' | 'advtrain' | 'teacher'
    number    : 0-based trial index within the search
    params    : JSON-encoded sampled hyperparameters
    objective : objective value (validation F1 or J)
    """

    __tablename__ = 'trials'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    stage = Column(String, nullable=False)
    number = Column(Integer, nullable=False)
    params = Column(Text, nullable=False)
    objective = Column(Float, nullable=False)

    run = relationship("Run", back_populates="trials")


class AttackRecordRow(Base):
    """
    Outcome of attacking one malware sample at one budget.

    Columns
    -------
    sample_id   : position of the sample in the attacked malware list
    budget      : maximum number of feature manipulations
    evaded      : True when the best individual flipped the label to goodware
    detected    : True when the system still labels the sample malware
    score       : best (lowest) malware score the attack reached
    queries     : oracle queries spent
    generations : GA generations run
    """

    __tablename__ = 'attack_records'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    sample_id = Column(Integer, nullable=False)
    budget = Column(Integer, nullable=False)
    evaded = Column(Boolean, nullable=False)
    detected = Column(Boolean, nullable=False)
    score = Column(Float, nullable=False)
    queries = Column(Integer, default=0)
    generations = Column(Integer, default=0)

    run = relationship("Run", back_populates="attack_records")
