"""Sign language translation with a CTC visual encoder, a seq2seq translator
and a visual-language mapper, trained progressively and jointly."""

__version__ = "0.1.0"
