"""Desk-scale streaming transducer lab.

Library + CLI covering word-piece tokenization, even-split alignments,
layer-normalized LSTM encoders with per-layer lookahead, transducer/CTC/CE
losses with verified gradients, greedy/beam/exhaustive decoding, WER and
emission-delay evaluation, LSTM-LM rescoring, and freeze-scope adaptation.
"""

__version__ = "0.1.0"
