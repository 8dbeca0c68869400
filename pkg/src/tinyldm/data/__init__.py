from .corpus import (
    Corpus,
    CorpusError,
    ImageTextPair,
    atomic_write_bytes,
    load_corpus,
    normalize_caption,
    png_bytes,
    resize_nearest,
    save_corpus,
)
from .synth import STYLES, mixed_corpus, render_bridge, synth_bridges
from .templates import STYLE_FILEWORDS, SUBJECT_TEMPLATES, PromptTemplate, read_templates, template_prompt
from .vocab import (
    DEFAULT_RESERVED,
    TokenizeError,
    Vocab,
    build_vocab,
    detokenize,
    normalize_prompt,
    split_words,
    tokenize,
)
