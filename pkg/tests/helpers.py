"""Shared fixtures-as-functions for the training and acceptance tests."""

import copy
import dataclasses

import numpy as np
import torch

from jade.architectures import to_tensor
from jade.data import SynthConfig, generate_synthetic_pair, paired_class_matched_iterator
from jade.latent import class_loglik
from jade.training import (
    STREAM_DROPOUT_PRIMARY,
    STREAM_REPARAM,
    TrainConfig,
    init_state,
    jade_forward,
    step_generator,
    train_step_jade,
)

SMALL_SYNTH = SynthConfig(n_per_class_primary=20, n_per_class_auxiliary=30, seed=5)


def small_pair():
    return generate_synthetic_pair(SMALL_SYNTH)


def quick_config(mode, **overrides):
    base = TrainConfig(mode=mode, epochs=2, batch_size=16, eval_every=10)
    return dataclasses.replace(base, **overrides)


def classifier_ablation_gap(pair, lr=0.05, seed=0):
    """Largest absolute difference between two classifier updates from one state.

    The first is a jade step with only the classification term switched on.
    The second is a paired-style step: cross-entropy on both domains' sampled
    content codes (the same noise and dropout draws), summed, with the encoders
    held out of the update.
    """
    cfg = TrainConfig(
        mode="jade", optimizer="sgd", learning_rate=lr, batch_size=16,
        w_recon=0.0, w_class=1.0, w_prior_kl=0.0, w_match=0.0, seed_params=seed, seed_noise=seed,
    )
    state = init_state(cfg)
    reference = copy.deepcopy(state.bundle)
    batch = next(paired_class_matched_iterator(pair.primary_train, pair.auxiliary_train, 16, seed, 0))

    with torch.no_grad():
        fwd = jade_forward(
            reference,
            to_tensor(batch.x_images), torch.as_tensor(batch.x_labels.astype(np.int64)),
            to_tensor(batch.y_images), torch.as_tensor(batch.y_labels.astype(np.int64)),
            cfg.weights, noise_generator=step_generator(cfg.seed_noise, 0, STREAM_REPARAM),
        )
    codes_x, codes_y = fwd.content_x.detach(), fwd.content_y.detach()
    gen = step_generator(cfg.seed_noise, 0, STREAM_DROPOUT_PRIMARY)
    lx = class_loglik(reference.classify_logits(codes_x, True, gen), torch.as_tensor(batch.x_labels.astype(np.int64)))
    ly = class_loglik(reference.classify_logits(codes_y, True, gen), torch.as_tensor(batch.y_labels.astype(np.int64)))
    loss = -(lx + ly).mean()
    grads = torch.autograd.grad(loss, list(reference.classifier_shared.parameters()))
    with torch.no_grad():
        expected = [p - lr * g for p, g in zip(reference.classifier_shared.parameters(), grads)]

    train_step_jade(state, batch)
    got = [p.detach() for p in state.bundle.classifier_shared.parameters()]
    return max(float((a - b).abs().max()) for a, b in zip(got, expected))


def moving_average_regressions(trace, window=200, horizon=2000):
    """Compare each smoothed value with the one a full window earlier.

    Returns (number of comparisons, list of relative drops for the windows that regressed).
    """
    trace = np.asarray(trace[:horizon], dtype=np.float64)
    smoothed = np.convolve(trace, np.ones(window) / window, mode="valid")
    prev, cur = smoothed[:-window], smoothed[window:]
    drops = [(p - c) / abs(p) for p, c in zip(prev, cur) if c < p]
    return len(cur), drops
