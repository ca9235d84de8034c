"""Probe pretraining hyperparameters: does the copy circuit form, and how fast?"""

import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from megan import data, model, training
from megan.numerics import backward
from megan.templates import default_templates


def probe_ce(base, cfg, batch):
    logits, _ = model.forward_batch(batch, base, cfg, None)
    targets, mask = training.shift_targets(batch.token_ids, batch.loss_mask)
    x = logits.data.reshape(-1, cfg.vocab_size)
    t, m = targets.reshape(-1), mask.reshape(-1)
    mx = x.max(1, keepdims=True)
    nll = mx[:, 0] + np.log(np.exp(x - mx).sum(1)) - x[np.arange(len(t)), t]
    first_idx = mask.argmax(1)
    flat_first = np.arange(mask.shape[0]) * mask.shape[1] + first_idx
    rest = m.copy()
    rest[flat_first] = False
    return float(nll[flat_first].mean()), float(nll[rest].mean())


def run(label, lr, wd, res_scale, epochs=2, corpus_seed=0):
    tt = default_templates()
    cfg = model.ModelConfig()
    corpus = data.synth_pretrain_corpus(corpus_seed, tt, samples_per_task=2000)
    split = data.synth_task_suite(corpus_seed)
    probe_samples = [s for task in split.meta_eval for s in task.samples[:13]]
    probe_batch = data.build_batch(probe_samples, tt, cfg.max_context)

    tcfg = training.TrainConfig(seed=0, batch_size=32, learning_rate=lr, weight_decay=wd, epochs=epochs)
    rng = np.random.default_rng(0)
    base = model.init_base(cfg, rng)
    if res_scale:
        scale = 1.0 / np.sqrt(2 * cfg.n_layers)
        for lw in base.layers:
            lw.wo.data *= scale
            lw.ffn.w_down.data *= scale
    opt = training.AdamW(base.named_tensors(), tcfg)
    total = epochs * int(np.ceil(len(corpus) / 32))
    t0 = time.time()
    step = 0
    with threadpool_limits(limits=1):
        for _ in range(epochs):
            for ids in training._line_batches(corpus, 32, rng):
                lm = ids != data.PAD
                lm[:, 0] = False
                tg, mk = training.shift_targets(ids, lm)
                logits, _ = model.forward_batch(training._plain_batch(ids), base, cfg, hyper=None)
                loss = training.ce_loss(logits, tg, mk)
                base.zero_grad()
                backward(loss)
                training.clip_grad_norm(base.named_tensors(), 1.0)
                opt.step(training.cosine_lr(step, total, tcfg))
                if step % 100 == 0 or step == total - 1:
                    f, r = probe_ce(base, cfg, probe_batch)
                    print(f"[{label}] step {step}/{total} ce={loss.item():.3f} "
                          f"firstY={f:.3f} restY={r:.3f} ({time.time()-t0:.0f}s)", flush=True)
                step += 1
    f, r = probe_ce(base, cfg, probe_batch)
    print(f"[{label}] FINAL firstY={f:.3f} restY={r:.3f} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    configs = {
        "A": dict(lr=3e-3, wd=0.01, res_scale=False),
        "B": dict(lr=1e-2, wd=0.0, res_scale=False),
        "C": dict(lr=1e-2, wd=0.0, res_scale=True),
    }
    for label, kw in configs.items():
        if which in ("all", label):
            run(label, **kw)
