"""Pure-copy learnability probe across init scales and learning rates."""

import time

import numpy as np
from threadpoolctl import threadpool_limits

from megan import data, model, training
from megan.numerics import backward

cfg = model.ModelConfig()


def make_lines(n, seed, transform=None):
    rng = np.random.default_rng(seed)
    names = list(data.META_TRAIN_CONDITIONS)
    out = []
    for _ in range(n):
        x = data._random_word(rng)
        fn = data.SYNTH_TRANSFORMS[transform] if transform else data.SYNTH_TRANSFORMS[names[int(rng.integers(5))]]
        out.append([data.BOS] + data.tokenize(x) + [data.SEP] + data.tokenize(fn(x)) + [data.EOS])
    return out


def pad(lines):
    w = max(len(l) for l in lines)
    ids = np.full((len(lines), w), data.PAD, dtype=np.int64)
    for i, l in enumerate(lines):
        ids[i, : len(l)] = l
    return ids


def run(label, lines, probe, init_std, lr, steps=2500, wd=0.0):
    tcfg = training.TrainConfig(seed=0, batch_size=32, learning_rate=lr, weight_decay=wd)
    rng = np.random.default_rng(0)
    base = model.init_base(cfg, rng)
    if init_std is not None:
        for name, t in base.named_tensors().items():
            if t.data.ndim == 2:
                t.data[:] = rng.normal(0, init_std, t.data.shape)
    opt = training.AdamW(base.named_tensors(), tcfg)
    step = 0
    t0 = time.time()
    with threadpool_limits(limits=1):
        while step < steps:
            for ids in training._line_batches(lines, 32, rng):
                lm = ids != data.PAD
                lm[:, 0] = False
                tg, mk = training.shift_targets(ids, lm)
                logits, _ = model.forward_batch(training._plain_batch(ids), base, cfg, hyper=None)
                loss = training.ce_loss(logits, tg, mk)
                base.zero_grad()
                backward(loss)
                training.clip_grad_norm(base.named_tensors(), 1.0)
                opt.step(training.cosine_lr(step, steps, tcfg))
                step += 1
                if step % 250 == 0 or step == steps:
                    pl, _ = model.forward_batch(training._plain_batch(probe), base, cfg, hyper=None)
                    sep_pos = (probe == data.SEP).argmax(1)
                    ymask = (np.arange(probe.shape[1])[None, :] > sep_pos[:, None]) & (probe != data.PAD)
                    ptg, pym = training.shift_targets(probe, ymask)
                    pce = training.ce_loss(pl, ptg, pym)
                    print(f"[{label}] step {step} ce={loss.item():.3f} yCE={pce.item():.3f} "
                          f"({time.time()-t0:.0f}s)", flush=True)
                if step >= steps:
                    break
    return base


if __name__ == "__main__":
    lines = make_lines(10000, 1, transform="identity")
    probe = pad(make_lines(64, 2, transform="identity"))
    run("copy-std0.02-lr3e3", lines, probe, None, 3e-3)
    run("copy-stdRsqD-lr3e3", lines, probe, 0.125, 3e-3)
    run("copy-stdRsqD-lr1e3", lines, probe, 0.125, 1e-3)
