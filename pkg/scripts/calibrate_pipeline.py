"""Calibration driver: full synth pipeline at desk scale for one seed."""

import json
import sys
import time

import numpy as np

from megan import data, evaluation, model, training, analysis
from megan.templates import default_templates


def main(seed: int, pre_epochs: int, meta_epochs: int, out_prefix: str):
    tt = default_templates()
    cfg = model.ModelConfig()
    t0 = time.time()

    corpus = data.synth_pretrain_corpus(seed, tt, samples_per_task=2000)
    tpre = training.TrainConfig(seed=seed, epochs=pre_epochs, batch_size=32, learning_rate=3e-3)

    def pp(step, total, value):
        if step % 50 == 0 or step == total - 1:
            print(f"[{time.time()-t0:7.1f}s] pretrain {step}/{total} ce={value:.4f}", flush=True)

    base, prelog = training.pretrain_base(corpus, cfg, tpre, progress=pp)
    model.save_checkpoint(base, None, cfg, f"{out_prefix}_base.ckpt")
    print(f"[{time.time()-t0:7.1f}s] pretrain done, final ce={prelog[-1]['ce']:.4f}", flush=True)

    split = data.synth_task_suite(seed)
    hash_before = base.content_hash()
    tmeta = training.TrainConfig(seed=seed, epochs=meta_epochs, batch_size=32, learning_rate=3e-3)

    def mp(step, total, entry):
        if step % 50 == 0 or step == total - 1:
            print(f"[{time.time()-t0:7.1f}s] meta {step}/{total} ce={entry['ce']:.4f} "
                  f"reg={entry['reg']:.4f} lr={entry['lr']:.2e}", flush=True)

    hyper, metalog = training.meta_train(base, split, tmeta, cfg, templates=tt, progress=mp)
    assert base.content_hash() == hash_before, "base changed during meta-training!"
    model.save_checkpoint(base, hyper, cfg, f"{out_prefix}_meta.ckpt")
    print(f"[{time.time()-t0:7.1f}s] meta done, final ce={metalog[-1]['ce']:.4f}", flush=True)

    results = {}
    for label, hyp in (("meta", hyper), ("base", None)):
        accs = {}
        for task in split.meta_eval + split.targets:
            key = f"{task.name}({task.setting})" if task.setting else task.name
            pairs = evaluation.evaluate_samples(task.samples, base, hyp, cfg, tt, max_new=24)
            accs[key] = evaluation.build_report(pairs)["aggregate"]["accuracy"]
        results[label] = accs
        print(f"[{time.time()-t0:7.1f}s] {label}: {json.dumps(accs)}", flush=True)

    held = [v for k, v in results["meta"].items() if "(" not in k]
    base_held = [v for k, v in results["base"].items() if "(" not in k]
    print(f"held-out meta acc={np.mean(held):.3f} base acc={np.mean(base_held):.3f} "
          f"rot13 LR={results['meta']['rot13(LR)']:.3f} (base {results['base']['rot13(LR)']:.3f})", flush=True)

    profiles = analysis.extract_betas(base, hyper, cfg, tt,
                                      [s for t in split.meta_eval for s in t.samples])
    sep = analysis.condition_separability(profiles)
    means, stds = analysis.layer_means(profiles)
    print(f"separability={sep:.3f} layer_means={np.array2string(means, precision=4)} "
          f"stds={np.array2string(stds, precision=4)}", flush=True)
    print(f"total {time.time()-t0:.1f}s", flush=True)


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    pre = int(sys.argv[2]) if len(sys.argv) > 2 else 3
    meta = int(sys.argv[3]) if len(sys.argv) > 3 else 3
    prefix = sys.argv[4] if len(sys.argv) > 4 else f"/tmp/cal_s{seed}"
    main(seed, pre, meta, prefix)
