import time

import numpy as np

from transducerlab import datasets as ds
from transducerlab import network as net
from transducerlab import tokenizer as tok
from transducerlab import trainer as tr

t0 = time.time()
spec = ds.make_spec("base", sentence_len=(2, 4))
corpus = ds.synth_corpus(spec, 120, seed=1)
vocab = tok.build_vocab(ds.transcripts(corpus), 30)
print(f"vocab={len(vocab)} pieces; mean T={np.mean([u.features.T for u in corpus]):.1f}; "
      f"mean U={np.mean([len(tok.encode(u.transcript, vocab)) for u in corpus]):.1f}")

arch = net.parse_arch_spec("24p16_2x1", feature_dim=8, stack_factor=3)
cfg = tr.TrainConfig(arch=arch, lr=3e-3, epochs=6, batch_size=8, seed=0)
t1 = time.time()
model, hist = tr.train_rnnt(cfg, corpus, vocab)
t2 = time.time()
for row in hist:
    print(row)
print(f"setup {t1-t0:.1f}s train {t2-t1:.1f}s")
