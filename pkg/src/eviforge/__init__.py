"""eviforge: build forensic training challenges as injectable evidence packages.

Workflow: format or obtain a base disk image, emulate activity on a copy,
diff the two into an evidence package, then inject packages (alone or
composed) into fresh copies of the base to mint challenge images.
"""

from .compose import (
    ChainBroken,
    IncompatibleKinds,
    SnapshotChain,
    TimestampOutOfRange,
    build_chain,
    compose_packages,
    reconstruct,
    retarget_time,
)
from .diffing import (
    ArtifactRecord,
    DiffReport,
    GeometryMismatch,
    diff_images,
    diff_volumes,
    sector_residue,
)
from .handlers import register_handler
from .inject import (
    BaseMismatch,
    ExtentOutOfBounds,
    InjectionOutcome,
    VerificationReport,
    inject_logical,
    inject_physical,
    verify_injection,
)
from .package import (
    AnswerKey,
    AnswerKeyEntry,
    EvidencePackage,
    PackageStats,
    ValidationReport,
    build_package,
    hash_blob,
    package_stats,
    read_package,
    strip_answer_key,
    validate_package,
    write_package,
)

__version__ = "0.1.0"
