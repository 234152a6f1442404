"""One episode through the classifier, step by step.

Builds the tiny synthetic dataset, samples a 5-way 1-shot episode with two
reference classes, and prints prototypes, channel scores, weights and the
posterior next to a plain prototype classifier.
"""

import tempfile

import torch

from drdm.dataspec import episode_rng, sample_episode
from drdm.skr import (
    compute_prototypes, inter_scores, intra_scores, protonet_posterior, skr_loss,
)
from drdm.train_eval.config import RunConfig
from drdm.train_eval.data import load_fewshot_data
from drdm.train_eval.fewshot import build_classifier

SMALL = {"data": {"synthetic": {"images_per_class": 8, "image_size": 16, "patch_size": 6, "patch_jitter": 2},
                  "extra_synthetic": {"images_per_class": 6, "image_size": 16, "patch_size": 6,
                                      "patch_jitter": 2},
                  "image_size": 16}}


def main():
    cfg = RunConfig().replace(**SMALL)
    with tempfile.TemporaryDirectory() as tmp:
        data = load_fewshot_data(cfg, tmp)
        ep = sample_episode(episode_rng(0, "demo", 0), data.pool("train"), data.extra_pool(), N=5, K=1, U=2, W=2)
        names = data.manifest.class_names()
        print("episode classes:", [names[int(it.source.rsplit(":", 1)[1])] for it in ep.support])
        print("reference classes:", [it.source for it in ep.external])

        model = build_classifier(cfg.fewshot, 16, seed=0).eval()
        S, Q, E = data.episode_tensors(ep)
        with torch.no_grad():
            fs, fq, fe = model.features(S), model.features(Q), model.features(E)
            protos = compute_prototypes(fs, ep.shot)
            print("feature maps:", tuple(fs.shape), "prototypes:", tuple(protos.shape))
            print("intra scores, class 0:", intra_scores(protos)[0, :4].tolist())
            print("inter scores, class 0:", inter_scores(protos)[0, :4].tolist())
            probs = model.posterior_from_maps(fs, fq, ep.shot)
            ref = protonet_posterior(fs, fq, ep.shot)
        print("fresh heads match a prototype classifier:", torch.allclose(probs, ref, atol=1e-6))
        labels = torch.tensor([it.label for it in ep.query])
        print("query accuracy:", (probs.argmax(1) == labels).float().mean().item())
        s_lab = torch.tensor([it.label for it in ep.support])
        e_lab = torch.tensor([it.label for it in ep.external])
        print("reference-class MS term:", skr_loss(fs, s_lab, fe, e_lab).item())


if __name__ == "__main__":
    main()
