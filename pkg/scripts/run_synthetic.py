"""End-to-end sanity run on the planted two-cluster dataset.

Trains the full model on synthetic data with known structure and compares
the resulting Recall@10 against the closed-form expectation for a random
ranking. Useful as a quick health check of the whole pipeline.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import oracles  # noqa: E402
from boxrec.evaluation import evaluate, relevant_items  # noqa: E402
from boxrec.synthetic import make_two_cluster_dataset  # noqa: E402
from boxrec.training import TrainConfig, fit, init_params  # noqa: E402


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--users", type=int, default=200)
    parser.add_argument("--items", type=int, default=400)
    parser.add_argument("--tags", type=int, default=40)
    parser.add_argument("--p-in", type=float, default=0.3)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--deterministic", action="store_true")
    args = parser.parse_args()

    if args.deterministic:
        torch.set_num_threads(1)

    dataset = make_two_cluster_dataset(
        n_users=args.users,
        n_items=args.items,
        n_tags=args.tags,
        p_in=args.p_in,
        seed=args.seed,
    )
    print(
        f"dataset: {dataset.n_users} users / {dataset.n_items} items / "
        f"{dataset.n_tags} tags, {len(dataset.train)} train assignments"
    )
    cfg = TrainConfig(
        dim=args.dim, n_layers=args.layers, max_epochs=args.epochs, seed=args.seed
    )
    ctg = dataset.training_graph()
    params = init_params(dataset.counts, cfg, torch.Generator().manual_seed(cfg.seed))

    t0 = time.time()
    result = fit(
        params,
        ctg,
        dataset,
        cfg,
        on_epoch=lambda e, loss: print(f"epoch {e}: loss {loss:.4f}", flush=True),
    )
    print(f"training took {time.time() - t0:.1f}s")
    first_loss = result.epoch_losses[0][1]
    last_loss = result.epoch_losses[-1][1]
    print(f"epoch loss: first {first_loss:.4f}, last {last_loss:.4f} "
          f"({100 * (1 - last_loss / first_loss):.1f}% drop)")

    ranking = evaluate(params, ctg, dataset, split="test", cfg=cfg.scoring)
    rel = relevant_items(dataset, "test")
    train_pos = dataset.train_positive_sets()
    users = sorted(rel)
    mean, sigma = oracles.expected_random_recall(
        [dataset.n_items - len(train_pos[u]) for u in users],
        [len(rel[u]) for u in users],
        10,
    )
    print(f"test recall@10: {ranking.recall[10]:.4f}")
    print(f"random-ranking expectation: {mean:.4f} (sigma {sigma:.5f})")
    print(f"lift over random: {ranking.recall[10] / mean:.2f}x")


if __name__ == "__main__":
    main()
