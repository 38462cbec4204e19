import numpy as np
import pytest
import torch

import oracles
import property_checks as props
from boxrec.boxes import AttentionParams, BoxEmbedding
from boxrec.graph import Assignment, build_ctg
from boxrec.objective import TripleBatch, bpr_loss, score
from boxrec.propagation import (
    LayerState,
    aggregate_item,
    aggregate_tag,
    aggregate_user,
    initial_state,
    propagate,
)
from boxrec.training import TrainConfig, init_params


def state_from(centers: dict, offsets: dict) -> LayerState:
    def t(x):
        return torch.tensor(np.asarray(x), dtype=torch.float64)

    return LayerState(
        users=BoxEmbedding(t(centers["user"]), t(offsets["user"])),
        items=BoxEmbedding(t(centers["item"]), t(offsets["item"])),
        tags=BoxEmbedding(t(centers["tag"]), t(offsets["tag"])),
        layer=0,
    )


class TestAggregateUser:
    def setup_method(self):
        # user 0: one item neighbor, no tags; user 1: two tags + one item
        self.g = build_ctg(
            [
                Assignment(0, 0, 0),
                Assignment(1, 0, 1),
                Assignment(1, 1, 1),
            ],
            (3, 2, 2),
        )
        # strip user0's tag edge so it has an item neighbor only
        self.g.ut = self.g.ut[self.g.ut[:, 0] != 0]
        self.g._user_tags[0] = np.empty(0, dtype=np.int64)

    def test_single_item_neighbor_copies_the_item_box(self):
        state = state_from(
            {"user": [[0.0, 0.0]] * 3, "item": [[1.0, 2.0], [0.0, 0.0]], "tag": [[0.0, 0.0]] * 2},
            {"user": [[1.0, 1.0]] * 3, "item": [[0.5, 0.25], [1.0, 1.0]], "tag": [[1.0, 1.0]] * 2},
        )
        out = aggregate_user(0, state, self.g, AttentionParams(2))
        assert torch.allclose(out.center, torch.tensor([1.0, 2.0], dtype=torch.float64))
        assert torch.allclose(out.offset, torch.tensor([0.5, 0.25], dtype=torch.float64))

    def test_offset_rule_combines_item_min_and_tag_max(self):
        state = state_from(
            {"user": [[0.0, 0.0]] * 3, "item": [[0.0, 0.0], [0.0, 0.0]], "tag": [[0.0, 0.0]] * 2},
            {
                "user": [[9.0, 9.0]] * 3,
                "item": [[9.0, 9.0], [2.0, 2.0]],
                "tag": [[1.0, 4.0], [3.0, 2.0]],
            },
        )
        out = aggregate_user(1, state, self.g, AttentionParams(2))
        # Max(Min(item offsets) = [2,2], Max(tag offsets) = [3,4]) = [3,4]
        assert out.offset.tolist() == [3.0, 4.0]

    def test_no_neighbors_returns_ego_box(self):
        state = state_from(
            {"user": [[0.0, 0.0], [0.0, 0.0], [5.0, -1.0]], "item": [[0.0, 0.0]] * 2, "tag": [[0.0, 0.0]] * 2},
            {"user": [[1.0, 1.0], [1.0, 1.0], [0.1, 0.7]], "item": [[1.0, 1.0]] * 2, "tag": [[1.0, 1.0]] * 2},
        )
        out = aggregate_user(2, state, self.g, AttentionParams(2))
        assert out.center.tolist() == [5.0, -1.0]
        assert out.offset.tolist() == [0.1, 0.7]


class TestAggregateTag:
    def setup_method(self):
        self.g = build_ctg(
            [Assignment(0, 0, 0), Assignment(1, 1, 0), Assignment(2, 1, 1)],
            (3, 2, 3),
        )

    def test_single_user_neighbor_copies_that_box(self):
        state = state_from(
            {"user": [[2.0], [0.0], [0.0]], "item": [[7.0], [0.0]], "tag": [[0.0]] * 3},
            {"user": [[0.4], [1.0], [1.0]], "item": [[0.9], [1.0]], "tag": [[1.0]] * 3},
        )
        # tag 0 neighbors: user 0 and item 0 -> min offset; centers attended
        out = aggregate_tag(0, state, self.g, AttentionParams(1))
        assert torch.allclose(
            out.center, torch.tensor([4.5], dtype=torch.float64)
        )  # uniform attention over centers 2 and 7
        assert out.offset.tolist() == [0.4]

    def test_offset_is_min_over_all_neighbors(self):
        state = state_from(
            {"user": [[0.0, 0.0]] * 3, "item": [[0.0, 0.0]] * 2, "tag": [[0.0, 0.0]] * 2},
            {
                "user": [[9.0, 9.0], [1.0, 4.0], [3.0, 2.0]],
                "item": [[9.0, 9.0], [2.0, 2.0]],
                "tag": [[8.0, 8.0]] * 2,
            },
        )
        # tag 1 neighbors: users {1, 2}, items {0, 1}
        out = aggregate_tag(1, state, self.g, AttentionParams(2))
        assert out.offset.tolist() == [1.0, 2.0]

    def test_isolated_tag_keeps_ego_box(self):
        g = build_ctg([Assignment(0, 0, 0)], (1, 1, 2))
        state = state_from(
            {"user": [[0.0]], "item": [[0.0]], "tag": [[0.0], [3.0]]},
            {"user": [[1.0]], "item": [[1.0]], "tag": [[1.0], [0.5]]},
        )
        out = aggregate_tag(1, state, g, AttentionParams(1))
        assert out.center.tolist() == [3.0]
        assert out.offset.tolist() == [0.5]


class TestAggregateItem:
    def setup_method(self):
        self.g = build_ctg(
            [Assignment(0, 0, 0), Assignment(1, 1, 0)],
            (2, 2, 2),
        )

    def test_single_tag_neighbor_after_user_removal(self):
        g = build_ctg([Assignment(0, 1, 1)], (1, 2, 2))
        g.ui = g.ui[:0]
        g._item_users[1] = np.empty(0, dtype=np.int64)
        state = state_from(
            {"user": [[0.0]], "item": [[0.0], [0.0]], "tag": [[0.0], [-2.5]]},
            {"user": [[1.0]], "item": [[1.0], [1.0]], "tag": [[1.0], [0.3]]},
        )
        out = aggregate_item(1, state, g, AttentionParams(1))
        assert out.center.tolist() == [-2.5]
        assert out.offset.tolist() == [0.3]

    def test_offset_is_max_over_all_neighbors(self):
        state = state_from(
            {"user": [[0.0, 0.0]] * 2, "item": [[0.0, 0.0]] * 2, "tag": [[0.0, 0.0]] * 2},
            {
                "user": [[1.0, 4.0], [3.0, 2.0]],
                "item": [[0.0, 0.0]] * 2,
                "tag": [[0.5, 0.5], [0.5, 0.5]],
            },
        )
        out = aggregate_item(0, state, self.g, AttentionParams(2))
        assert out.offset.tolist() == [3.0, 4.0]

    def test_larger_user_offsets_grow_the_item(self):
        base = state_from(
            {"user": [[0.0, 0.0]] * 2, "item": [[0.0, 0.0]] * 2, "tag": [[0.0, 0.0]] * 2},
            {
                "user": [[1.0, 1.0], [1.0, 1.0]],
                "item": [[0.0, 0.0]] * 2,
                "tag": [[0.5, 0.5]] * 2,
            },
        )
        small = aggregate_item(0, base, self.g, AttentionParams(2))
        grown = state_from(
            {"user": [[0.0, 0.0]] * 2, "item": [[0.0, 0.0]] * 2, "tag": [[0.0, 0.0]] * 2},
            {
                "user": [[1.0, 1.0], [2.5, 2.5]],
                "item": [[0.0, 0.0]] * 2,
                "tag": [[0.5, 0.5]] * 2,
            },
        )
        large = aggregate_item(0, grown, self.g, AttentionParams(2))
        assert (large.offset >= small.offset).all()


class TestPropagate:
    def make_setup(self, seed=0, d=3, n_layers=2, counts=(3, 4, 2), n_assign=8):
        rng = np.random.default_rng(seed)
        triples = np.stack(
            [
                rng.integers(counts[0], size=n_assign),
                rng.integers(counts[2], size=n_assign),
                rng.integers(counts[1], size=n_assign),
            ],
            axis=1,
        ).astype(np.int64)
        g = build_ctg(triples, counts)
        cfg = TrainConfig(dim=d, n_layers=n_layers, batch_size=4, seed=seed)
        params = init_params(counts, cfg, torch.Generator().manual_seed(seed))
        return params, g, cfg

    def test_zero_layers_returns_raw_tables(self):
        params, g, _ = self.make_setup()
        state = propagate(params, g, 0)
        assert torch.equal(state.users.center, params.user_center)
        assert torch.equal(state.users.offset, params.user_offset.abs())
        assert state.layer == 0

    def test_triangle_matches_hand_rolled_single_step(self):
        """One user-item-tag triangle, checked against the loop oracle."""
        g = build_ctg([Assignment(0, 0, 0)], (1, 1, 1))
        cfg = TrainConfig(dim=3, n_layers=1, batch_size=1, seed=5)
        params = init_params((1, 1, 1), cfg, torch.Generator().manual_seed(5))
        state = propagate(params, g, 1)

        centers = {
            "user": params.user_center.detach().numpy(),
            "item": params.item_center.detach().numpy(),
            "tag": params.tag_center.detach().numpy(),
        }
        offsets = {
            "user": np.abs(params.user_offset.detach().numpy()),
            "item": np.abs(params.item_offset.detach().numpy()),
            "tag": np.abs(params.tag_offset.detach().numpy()),
        }
        attn = params.attention[0]
        exp_c, exp_o = oracles.layer_oracle(
            centers, offsets, g, attn.weight.detach().numpy(), attn.bias.detach().numpy()
        )
        np.testing.assert_allclose(state.users.center.detach().numpy(), exp_c["user"], atol=1e-12)
        np.testing.assert_allclose(state.users.offset.detach().numpy(), exp_o["user"], atol=1e-12)
        np.testing.assert_allclose(state.items.center.detach().numpy(), exp_c["item"], atol=1e-12)
        np.testing.assert_allclose(state.tags.center.detach().numpy(), exp_c["tag"], atol=1e-12)

    def test_random_graph_matches_oracle_layer(self):
        params, g, _ = self.make_setup(seed=3)
        state = propagate(params, g, 1)
        centers = {
            "user": params.user_center.detach().numpy(),
            "item": params.item_center.detach().numpy(),
            "tag": params.tag_center.detach().numpy(),
        }
        offsets = {
            "user": np.abs(params.user_offset.detach().numpy()),
            "item": np.abs(params.item_offset.detach().numpy()),
            "tag": np.abs(params.tag_offset.detach().numpy()),
        }
        attn = params.attention[0]
        exp_c, exp_o = oracles.layer_oracle(
            centers, offsets, g, attn.weight.detach().numpy(), attn.bias.detach().numpy()
        )
        for kind, table in (("user", state.users), ("item", state.items), ("tag", state.tags)):
            np.testing.assert_allclose(table.center.detach().numpy(), exp_c[kind], atol=1e-10)
            np.testing.assert_allclose(table.offset.detach().numpy(), exp_o[kind], atol=1e-10)

    def test_vectorized_agrees_with_per_node_functions(self):
        params, g, cfg = self.make_setup(seed=9)
        state0 = initial_state(params)
        state1 = propagate(params, g, 1)
        attn = params.attention[0]
        for u in range(g.n_users):
            ref = aggregate_user(u, state0, g, attn)
            assert torch.allclose(state1.users.center[u], ref.center, atol=1e-12)
            assert torch.allclose(state1.users.offset[u], ref.offset, atol=1e-12)
        for t in range(g.n_tags):
            ref = aggregate_tag(t, state0, g, attn)
            assert torch.allclose(state1.tags.center[t], ref.center, atol=1e-12)
            assert torch.allclose(state1.tags.offset[t], ref.offset, atol=1e-12)
        for i in range(g.n_items):
            ref = aggregate_item(i, state0, g, attn)
            assert torch.allclose(state1.items.center[i], ref.center, atol=1e-12)
            assert torch.allclose(state1.items.offset[i], ref.offset, atol=1e-12)

    def test_repeat_runs_bit_identical(self):
        params, g, cfg = self.make_setup(seed=13)
        s1 = propagate(params, g, cfg.n_layers)
        s2 = propagate(params, g, cfg.n_layers)
        assert torch.equal(s1.users.center, s2.users.center)
        assert torch.equal(s1.items.offset, s2.items.offset)
        assert torch.equal(s1.tags.center, s2.tags.center)

    def test_too_many_layers_rejected(self):
        params, g, _ = self.make_setup()
        with pytest.raises(ValueError, match="attention maps"):
            propagate(params, g, 5)

    def test_negative_layers_rejected(self):
        params, g, _ = self.make_setup()
        with pytest.raises(ValueError, match="non-negative"):
            propagate(params, g, -1)


class TestPropagationInvariants:
    def test_edge_order_independence(self):
        props.check_propagation_order_independence(40, seed=19)

    def test_centers_ignore_offsets(self):
        props.check_center_offset_independence(40, seed=23)

    def test_tag_shrink_item_grow(self):
        props.check_tag_shrink_item_grow(40, seed=29)

    def test_gradient_through_two_layers_matches_fd(self):
        """End-to-end BPR-through-propagation gradient vs central differences."""
        rng = np.random.default_rng(31)
        failures = []
        for trial in range(8):
            counts = (3, 3, 2)
            triples = np.stack(
                [
                    rng.integers(counts[0], size=7),
                    rng.integers(counts[2], size=7),
                    rng.integers(counts[1], size=7),
                ],
                axis=1,
            ).astype(np.int64)
            g = build_ctg(triples, counts)
            cfg = TrainConfig(dim=2, n_layers=2, batch_size=4, seed=int(rng.integers(1 << 31)))
            params = init_params(counts, cfg, torch.Generator().manual_seed(trial))
            with torch.no_grad():
                # keep raw offsets away from zero so |.| stays smooth under FD
                for name, tab in params.table_items():
                    if name.endswith("offset"):
                        tab.add_(0.2 * tab.sign())
            batch = TripleBatch(
                torch.tensor([0, 1]), torch.tensor([0, 2]), torch.tensor([1, 0])
            )

            def loss_value():
                state = propagate(params, g, 2)
                u = state.users[batch.users]
                sp = score(u, state.items[batch.pos_items], cfg.scoring)
                sn = score(u, state.items[batch.neg_items], cfg.scoring)
                return bpr_loss(batch, sp, sn, params, 1e-4)

            out = loss_value()
            params.zero_grad()
            out.backward()
            step = 1e-5
            for name, tab in params.table_items():
                grad = tab.grad
                if grad is None:
                    continue
                idx = tuple(int(rng.integers(s)) for s in tab.shape)
                with torch.no_grad():
                    orig = tab[idx].item()
                    tab[idx] = orig + step
                    hi = float(loss_value().detach())
                    tab[idx] = orig - step
                    lo = float(loss_value().detach())
                    tab[idx] = orig
                fd = (hi - lo) / (2 * step)
                ad = grad[idx].item()
                rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
                if rel >= 1e-4:
                    failures.append((trial, name, idx, fd, ad, rel))
        assert not failures, failures
