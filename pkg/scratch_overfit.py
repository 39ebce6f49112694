import time

import numpy as np

from transducerlab import datasets as ds
from transducerlab import decoder as dec
from transducerlab import network as net
from transducerlab import tokenizer as tok
from transducerlab import trainer as tr

spec = ds.make_spec("base", sentence_len=(2, 3))
corpus = ds.synth_corpus(spec, 10, seed=1)
vocab = tok.build_vocab(ds.transcripts(corpus), 30)
print(f"vocab={len(vocab)}; T={[u.features.T for u in corpus]}")

arch = net.parse_arch_spec("32p16_2x1", feature_dim=8, stack_factor=3)
cfg = tr.TrainConfig(arch=arch, lr=4e-3, epochs=60, batch_size=5, seed=0,
                     eval_dev_wer=False)
t1 = time.time()
model = net.init_model(arch, vocab.n_labels, cfg.seed)
items = tr._prepare(corpus, vocab, arch)
opt = tr.Adam(model.named_tensors(), lr=cfg.lr)
rng = np.random.default_rng(0)
for epoch in range(cfg.epochs):
    for batch in tr._batches(items, cfg, vocab, rng):
        opt.zero_grad()
        total = None
        for item in batch:
            loss = tr._utterance_nll(model, item)
            total = loss if total is None else total + loss
        (total * (1.0 / len(batch))).backward()
        tr.clip_global_norm(model.named_tensors(), cfg.clip)
        opt.step()
    if epoch % 10 == 9 or epoch == 0:
        w = tr._greedy_wer(model, items, vocab)
        print(f"epoch {epoch}: loss={tr._mean_loss(model, items):.3f} wer={w:.1f} "
              f"({time.time()-t1:.1f}s)")
