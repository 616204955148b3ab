"""Relational schema: one dataset-description half, one job-monitoring half.

Task resource requirements and tray references are denormalized onto the
job/task rows so claim queries can filter on capabilities directly. The
run table doubles as the file catalog: off-line input files carry run
bookkeeping, job outputs carry digests for post-transfer verification.
"""

from sqlalchemy import (
    Boolean,
    Column,
    Float,
    ForeignKey,
    ForeignKeyConstraint,
    Integer,
    MetaData,
    String,
    Table,
    Text,
)

metadata = MetaData()

dataset = Table(
    "dataset",
    metadata,
    Column("dataset_id", Integer, primary_key=True, autoincrement=True),
    Column("description", Text, nullable=False, default=""),
    Column("category", Text, nullable=False, default=""),
    # declared job count; 0 means off-line mode (grown by file mapping)
    Column("job_count", Integer, nullable=False),
    Column("alias", String(255), nullable=True, unique=True),
    Column("workflow", String(16), nullable=False),  # monolithic | dag
    Column("submitter", String(255), nullable=False, default=""),
    Column("created_at", Float, nullable=False),
    # canonical serialized steering; task definitions for zero-job
    # (off-line) datasets have no task rows to reassemble from
    Column("steering_xml", Text, nullable=False, default=""),
)

steering_parameter = Table(
    "steering_parameter",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("value", Text, nullable=False),
)

meta_project = Table(
    "meta_project",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("version", String(255), nullable=True),
)

tray = Table(
    "tray",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("iterations", Integer, nullable=False, default=1),
    Column("metaproject_refs", Text, nullable=False, default="[]"),  # JSON list
)

module = Table(
    "module",
    metadata,
    Column("dataset_id", Integer, primary_key=True),
    Column("tray_name", String(255), primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("class_name", Text, nullable=False),
    Column("metaproject", String(255), nullable=True),
    ForeignKeyConstraint(["dataset_id", "tray_name"], ["tray.dataset_id", "tray.name"]),
)

cparameter = Table(
    "cparameter",
    metadata,
    Column("dataset_id", Integer, primary_key=True),
    Column("tray_name", String(255), primary_key=True),
    Column("module_name", String(255), primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("type", String(16), nullable=False, default="string"),
    Column("value", Text, nullable=False),  # raw text; JSON array for liststring
    ForeignKeyConstraint(
        ["dataset_id", "tray_name", "module_name"],
        ["module.dataset_id", "module.tray_name", "module.name"],
    ),
)

_job_lifecycle_columns = lambda: [
    Column("state", String(16), nullable=False),
    Column("retries", Integer, nullable=False, default=0),
    Column("passkey", String(64), nullable=False),
    Column("host", String(255), nullable=True),
    Column("grid_id", String(255), nullable=True),
    Column("site", String(255), nullable=True),
    Column("last_update", Float, nullable=False),
    Column("state_entered", Float, nullable=False),
    Column("error_message", Text, nullable=True),
    Column("needs_gpu", Boolean, nullable=False, default=False),
    Column("min_memory_mb", Integer, nullable=False, default=0),
    Column("min_disk_mb", Integer, nullable=False, default=0),
    Column("max_walltime_s", Integer, nullable=False, default=3600),
]

job = Table(
    "job",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("job_index", Integer, primary_key=True),
    *_job_lifecycle_columns(),
    Column("verified", Boolean, nullable=False, default=False),
)

task = Table(
    "task",
    metadata,
    Column("dataset_id", Integer, primary_key=True),
    Column("job_index", Integer, primary_key=True),
    Column("task_name", String(255), primary_key=True),
    Column("ordinal", Integer, nullable=False),
    Column("tray_refs", Text, nullable=False, default="[]"),  # JSON list
    *_job_lifecycle_columns(),
    ForeignKeyConstraint(
        ["dataset_id", "job_index"], ["job.dataset_id", "job.job_index"]
    ),
)

task_rel = Table(
    "task_rel",
    metadata,
    Column("dataset_id", Integer, primary_key=True),
    Column("job_index", Integer, primary_key=True),
    Column("parent", String(255), primary_key=True),
    Column("child", String(255), primary_key=True),
    ForeignKeyConstraint(
        ["dataset_id", "job_index"], ["job.dataset_id", "job.job_index"]
    ),
)

run = Table(
    "run",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("kind", String(8), primary_key=True),  # input | output
    Column("path", Text, primary_key=True),
    Column("job_index", Integer, nullable=False),
    Column("task_name", String(255), nullable=True),
    Column("run_number", Integer, nullable=True),
    Column("date", String(32), nullable=True),
    Column("size", Integer, nullable=False, default=0),
    Column("md5", String(32), nullable=True),
)

grid_statistics = Table(
    "grid_statistics",
    metadata,
    Column("dataset_id", Integer, ForeignKey("dataset.dataset_id"), primary_key=True),
    Column("site_id", String(255), primary_key=True),
    # assigned rows gate claiming; bare counter rows do not
    Column("assigned", Boolean, nullable=False, default=False),
    Column("status", String(16), nullable=False, default="active"),  # active | stopped
    Column("submitted", Integer, nullable=False, default=0),
    Column("finished", Integer, nullable=False, default=0),
    Column("errors", Integer, nullable=False, default=0),
    Column("updated_at", Float, nullable=False, default=0.0),
)

job_statistics = Table(
    "job_statistics",
    metadata,
    Column("dataset_id", Integer, primary_key=True),
    Column("job_index", Integer, primary_key=True),
    Column("name", String(255), primary_key=True),
    Column("value", Float, nullable=False),
    ForeignKeyConstraint(
        ["dataset_id", "job_index"], ["job.dataset_id", "job.job_index"]
    ),
)
