"""dreamforge: content-addressed, resumable model-in-the-loop data workflows.

Chain steps (data sources, prompted transforms, shuffles, filters) and
trainers inside a session; every node is fingerprinted over its configuration
and ancestry, outputs are cached on disk, prompts are cached per model in a
single-file store, and interrupted work resumes where it stopped. Each node
carries a recursively-traced provenance card, so an entire workflow can be
shared and bit-exactly reproduced from its session folder, even offline.

Typical use::

    import dreamforge as df

    with df.open_session("./out") as s:
        src = df.data_source(s, "seeds", df.Dataset.from_rows(["topic"], rows))
        gen = df.process_with_prompt(
            s, "expand", model, df.PromptTemplate("Write about {{topic}}"),
            src, out_column="text")
        df.train_toy(s, "classifier", gen, text_column="text", label_column="topic")
"""

from . import errors
from .dataset import Dataset, concat, from_rows, load
from .errors import (
    AuthMissing,
    CheckpointMismatch,
    DepthExceeded,
    DreamforgeError,
    EmptyName,
    EmptySchema,
    HashMismatch,
    IncompatibleFormat,
    IncompleteAncestry,
    LockHeld,
    MissingExamples,
    NameConflict,
    NotASession,
    ProviderError,
    ReplayMiss,
    SchemaMismatch,
    SessionLocked,
    StepFailed,
    TrainerFailed,
    UncacheableWithoutLogicKey,
)
from .fingerprint import (
    FORMAT_VERSION,
    Fingerprint,
    canonical_bytes,
    fingerprint,
    fingerprint_bytes,
    make_node,
    to_jsonable,
    workflow_node,
)
from .model import (
    GenerationConfig,
    DisabledTransport,
    HttpTransport,
    MockTransport,
    ModelRef,
    PromptCache,
    cache_key,
    embed,
    embed_key,
    generate,
    generate_batch,
    retry_policy,
)
from .provenance import Card, CardNode, build_card, export, export_from_folder, render_card
from .records import StepRecord, TrainerRecord
from .rng import SplitMix64, fisher_yates, fnv1a64
from .session import (
    ENGINE_VERSION,
    Session,
    close_session,
    normalize_name,
    open_session,
    register_step,
)
from .step import (
    BackgroundHandle,
    PromptTemplate,
    concat_step,
    data_source,
    few_shot_prompt,
    filter_step,
    generate_from_prompt,
    map_step,
    output_dataset,
    process_with_prompt,
    run_in_background,
    run_step,
    shuffle_step,
    wait,
)
from .trainer import (
    Checkpoint,
    ToyModel,
    load_model,
    predict,
    resume_from_checkpoint,
    text_features,
    train_toy,
)

__version__ = ENGINE_VERSION
