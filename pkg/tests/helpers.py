"""Small experiment configs and random test instances."""
from spotpatch.harness import ExperimentConfig, OptimizerConfig, SourceConfig, TaskConfig


def tiny_config(**kw) -> ExperimentConfig:
    kw.setdefault("source", SourceConfig(widths=(4, 6, 8), strides=(2, 2, 2), steps=40, batch_size=16,
                                         n_train=128, n_eval=32))
    kw.setdefault("optimizer", OptimizerConfig(steps=10, batch_size=16))
    kw.setdefault("tasks", (TaskConfig("a", 0.2, 11, 1, n_train=48, n_eval=24),
                            TaskConfig("b", 0.6, 12, 2, n_train=48, n_eval=24)))
    kw.setdefault("sweep", (1e-4, 1e-2))
    return ExperimentConfig(**kw)


def random_ap_instance(rng, n_max=6, images=2, size=6):
    def box():
        x0, y0 = rng.uniform(0, size - 1, 2)
        w, h = rng.uniform(0.5, 3, 2)
        return x0, y0, x0 + w, y0 + h

    gts = [(box(), int(rng.integers(images))) for _ in range(rng.integers(1, n_max + 1))]
    preds = []
    for _ in range(rng.integers(0, n_max + 1)):
        if gts and rng.random() < 0.6:
            (g, img) = gts[rng.integers(len(gts))]
            jitter = rng.uniform(-0.4, 0.4, 4)
            b = (g[0] + jitter[0], g[1] + jitter[1], max(g[2] + jitter[2], g[0] + jitter[0] + 0.1),
                 max(g[3] + jitter[3], g[1] + jitter[1] + 0.1))
        else:
            b, img = box(), int(rng.integers(images))
        # coarse scores so ties occur
        preds.append((b, float(rng.integers(1, 5)) / 4, img))
    return preds, gts
