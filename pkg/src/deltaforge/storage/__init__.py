from .layout import (  # noqa: F401
    AcidDirectory,
    DirKind,
    RecordId,
    SelectedDirectories,
    format_base,
    format_delete_delta,
    format_delta,
    list_acid_dirs,
    parse_dir_name,
    parse_partition_dir,
    partition_path,
    render_partition_segment,
    select_directories,
)
from .columnfile import (  # noqa: F401
    FileMeta,
    decode_chunk,
    decode_column_file,
    encode_column_file,
    read_file_meta,
    write_column_file,
)
from .io import FileStore  # noqa: F401
from .write import TxnWriter  # noqa: F401
from .read import (  # noqa: F401
    BloomPredicate,
    ColumnPredicate,
    DirectIO,
    InPredicate,
    RangePredicate,
    ScanCounters,
    ScanRequest,
    snapshot_read,
)
