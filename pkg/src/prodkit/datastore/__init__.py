from prodkit.datastore.store import (
    AliasCollision,
    BadPasskey,
    DatasetNotGrowable,
    Datastore,
    DatastoreError,
    DuplicatePath,
    FileEntry,
    NonFiniteValue,
    ReadOnlyDatastore,
    StaleState,
    StatAggregate,
    StorageUnavailable,
    UnknownDataset,
    UnknownFilter,
    UnknownJob,
    ValidationFailed,
    make_engine,
)

__all__ = [
    "AliasCollision",
    "BadPasskey",
    "DatasetNotGrowable",
    "Datastore",
    "DatastoreError",
    "DuplicatePath",
    "FileEntry",
    "NonFiniteValue",
    "ReadOnlyDatastore",
    "StaleState",
    "StatAggregate",
    "StorageUnavailable",
    "UnknownDataset",
    "UnknownFilter",
    "UnknownJob",
    "ValidationFailed",
    "make_engine",
]
