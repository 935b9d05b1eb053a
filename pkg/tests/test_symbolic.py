from collections import deque
from dataclasses import dataclass

import numpy as np
import pytest

from fc3.symbolic import (
    ActionSchema,
    ActionTree,
    GroundAction,
    MutexGroup,
    SymbolicError,
    build_controller_chains,
    forward_verify,
    generate_action_tree,
    ground_actions,
    ground_mutex_groups,
    make_consistency_checker,
    regress,
    trim_action_tree,
)


def blocks_schemas():
    return [
        ActionSchema(
            "pick_table",
            params=(("b", "block"),),
            pre=(("free", "?b"), ("on_table", "?b"), ("empty",)),
            add=(("inhand", "?b"),),
            delete=(("free", "?b"), ("on_table", "?b"), ("empty",)),
        ),
        ActionSchema(
            "unstack",
            params=(("b", "block"), ("c", "block")),
            pre=(("free", "?b"), ("on", "?b", "?c"), ("empty",)),
            add=(("inhand", "?b"), ("free", "?c")),
            delete=(("free", "?b"), ("on", "?b", "?c"), ("empty",)),
        ),
        ActionSchema(
            "place_on",
            params=(("b", "block"), ("c", "block")),
            pre=(("inhand", "?b"), ("free", "?c")),
            add=(("on", "?b", "?c"), ("free", "?b"), ("empty",)),
            delete=(("inhand", "?b"), ("free", "?c")),
        ),
        ActionSchema(
            "place_table",
            params=(("b", "block"),),
            pre=(("inhand", "?b"),),
            add=(("on_table", "?b"), ("free", "?b"), ("empty",)),
            delete=(("inhand", "?b"),),
        ),
    ]


def blocks_mutexes(objects):
    groups = [
        # a block sits in exactly one place
        MutexGroup(params=(("b", "block"),), atoms=(("on_table", "?b"), ("on", "?b", "*"), ("inhand", "?b"))),
        # at most one block on top of another / claiming it free
        MutexGroup(params=(("c", "block"),), atoms=(("free", "?c"), ("on", "*", "?c"))),
        # one gripper
        MutexGroup(atoms=(("empty",), ("inhand", "*"))),
    ]
    return make_consistency_checker(ground_mutex_groups(groups, objects))


def blocks_objects(n):
    names = ["b%d" % i for i in range(n)]
    return {name: "block" for name in names}, names


def flat_init(names):
    atoms = {("empty",)}
    for n in names:
        atoms.add(("free", n))
        atoms.add(("on_table", n))
    return frozenset(atoms)


def gen_blocks_tree(goal, init, actions, objects, explore, **kw):
    return generate_action_tree(
        goal, init, actions, explore, consistent=blocks_mutexes(objects), **kw
    )


def apply_forward(state, action):
    return frozenset((state - action.delete) | action.add)


def bfs_shortest_plan(init, goal, actions, cap=200000):
    """Exhaustive forward BFS; the independent oracle for plan length."""
    init = frozenset(init)
    goal = frozenset(goal)
    seen = {init: 0}
    queue = deque([init])
    while queue:
        s = queue.popleft()
        if goal <= s:
            return seen[s]
        for a in actions:
            if a.pre <= s:
                nxt = apply_forward(s, a)
                if nxt not in seen:
                    if len(seen) >= cap:
                        raise RuntimeError("state space too large")
                    seen[nxt] = seen[s] + 1
                    queue.append(nxt)
    return None


class TestRegress:
    def test_irrelevant_action_none(self):
        a = GroundAction("a", frozenset(), frozenset({("p",)}), frozenset())
        assert regress(a, frozenset({("q",)})) is None

    def test_hand_applied_update(self):
        # place(A,B): pre {holding(A), clear(B)}, add {on(A,B)},
        # del {holding(A), clear(B)}
        a = GroundAction(
            "place(A,B)",
            pre=frozenset({("holding", "A"), ("clear", "B")}),
            add=frozenset({("on", "A", "B")}),
            delete=frozenset({("holding", "A"), ("clear", "B")}),
        )
        state = frozenset({("on", "A", "B"), ("on", "B", "C")})
        out = regress(a, state)
        assert out == frozenset({("on", "B", "C"), ("holding", "A"), ("clear", "B")})

    def test_delete_conflict_none(self):
        a = GroundAction(
            "a",
            pre=frozenset(),
            add=frozenset({("p",)}),
            delete=frozenset({("q",)}),
        )
        assert regress(a, frozenset({("p",), ("q",)})) is None


def test_ground_actions_deterministic_and_validated():
    schemas = blocks_schemas()
    objects, _ = blocks_objects(3)
    a1 = ground_actions(schemas, objects)
    a2 = ground_actions(schemas, objects)
    assert [a.name for a in a1] == [a.name for a in a2]
    assert len([a for a in a1 if a.schema == "unstack"]) == 6  # 3*2 ordered pairs
    bad = [ActionSchema("bad", params=(("b", "block"),), add=(("p", "?b"),), delete=(("p", "?b"),))]
    with pytest.raises(SymbolicError):
        ground_actions(bad, objects)


class TestGenerateActionTree:
    def test_goal_already_true_empty_plan(self):
        schemas = blocks_schemas()
        objects, names = blocks_objects(2)
        actions = ground_actions(schemas, objects)
        init = flat_init(names)
        goal = frozenset({("on_table", "b0")})
        tree, plan, d_i, cand = gen_blocks_tree(goal, init, actions, objects, explore=0)
        assert plan == []
        assert d_i == 0
        assert cand == goal

    def test_three_block_tower_matches_bfs_oracle(self):
        schemas = blocks_schemas()
        objects, names = blocks_objects(3)
        actions = ground_actions(schemas, objects)
        init = flat_init(names)
        goal = frozenset({("on", "b0", "b1"), ("on", "b1", "b2")})
        tree, plan, d_i, cand = gen_blocks_tree(goal, init, actions, objects, explore=2)
        oracle = bfs_shortest_plan(init, goal, actions)
        assert plan is not None
        assert len(plan) == oracle == d_i
        # The tree explores beyond the plan depth but not past d_I + j.
        assert max(n.depth for n in tree.nodes.values()) <= d_i + 2

    def test_explore_zero_truncates_at_د_i(self):
        schemas = blocks_schemas()
        objects, names = blocks_objects(3)
        actions = ground_actions(schemas, objects)
        init = flat_init(names)
        goal = frozenset({("on", "b0", "b1")})
        tree, plan, d_i, _ = gen_blocks_tree(goal, init, actions, objects, explore=0)
        assert plan is not None
        assert max(n.depth for n in tree.nodes.values()) <= d_i

    def test_no_plan_returns_none(self):
        a = GroundAction("a", frozenset({("q",)}), frozenset({("g",)}), frozenset())
        tree, plan, _, cand = generate_action_tree(
            frozenset({("g",)}), frozenset({("r",)}), [a], explore=1
        )
        assert plan is None and cand is None


class TestForwardVerify:
    def test_single_consistent_edge(self):
        goal = frozenset({("g",)})
        a = GroundAction("a", frozenset({("p",)}), frozenset({("g",)}), frozenset())
        tree = ActionTree(root=goal)
        tree.add(goal, None, None, 0)
        child = frozenset({("p",)})
        tree.add(child, goal, a, 1)
        ok, plan = forward_verify(child, tree)
        assert ok and plan == [a]

    def test_hand_built_unreachable_state_fails(self):
        # The second action's precondition is never established forward.
        goal = frozenset({("g",)})
        a1 = GroundAction("a1", frozenset({("p",)}), frozenset({("g",)}), frozenset())
        a2 = GroundAction("a2", frozenset({("missing",)}), frozenset({("p",)}), frozenset())
        tree = ActionTree(root=goal)
        tree.add(goal, None, None, 0)
        s1 = frozenset({("p",)})
        tree.add(s1, goal, a1, 1)
        s2 = frozenset({("q",)})  # does not contain "missing"
        tree.add(s2, s1, a2, 2)
        ok, _ = forward_verify(s2, tree)
        assert not ok

    def test_root_verifies_with_empty_plan(self):
        goal = frozenset({("g",)})
        tree = ActionTree(root=goal)
        tree.add(goal, None, None, 0)
        ok, plan = forward_verify(goal, tree)
        assert ok and plan == []


class TestTrim:
    @staticmethod
    def tower_tree():
        schemas = blocks_schemas()
        objects, names = blocks_objects(3)
        actions = ground_actions(schemas, objects)
        init = flat_init(names)
        goal = frozenset({("on", "b0", "b1"), ("on", "b1", "b2")})
        return gen_blocks_tree(goal, init, actions, objects, explore=2)

    def test_radius_zero_keeps_exactly_plan_path(self):
        tree, plan, d_i, cand = self.tower_tree()
        trimmed = trim_action_tree(tree, cand, 0)
        assert len(trimmed) == d_i + 1
        states = set(trimmed.nodes)
        node = cand
        while node is not None:
            assert node in states
            node = trimmed.nodes[node].parent

    def test_radius_larger_than_depth_keeps_everything(self):
        tree, _, _, cand = self.tower_tree()
        trimmed = trim_action_tree(tree, cand, len(tree) + 1)
        assert len(trimmed) == len(tree)

    def test_trim_distance_bound_against_bfs_oracle(self):
        tree, _, _, cand = self.tower_tree()
        r = 1
        trimmed = trim_action_tree(tree, cand, r)
        # independent BFS over the full tree adjacency
        path = [cand]
        node = tree.nodes[cand]
        while node.parent is not None:
            path.append(node.parent)
            node = tree.nodes[node.parent]
        adj = {}
        for s, n in tree.nodes.items():
            if n.parent is not None:
                adj.setdefault(s, []).append(n.parent)
                adj.setdefault(n.parent, []).append(s)
        dist = {s: 0 for s in path}
        q = deque(path)
        while q:
            s = q.popleft()
            for nb in adj.get(s, []):
                if nb not in dist:
                    dist[nb] = dist[s] + 1
                    q.append(nb)
        for s in tree.nodes:
            if dist.get(s, 10**9) <= r:
                assert s in trimmed.nodes
            else:
                assert s not in trimmed.nodes


@dataclass
class StubChain:
    controllers: list
    source: tuple


def stub_factory(plan, state):
    return StubChain(controllers=[a.name for a in plan], source=tuple(a.name for a in plan))


class TestBuildChains:
    def test_k_nodes_give_k_minus_one_chains(self):
        tree, _, _, cand = TestTrim.tower_tree()
        trimmed = trim_action_tree(tree, cand, 1)
        chains = build_controller_chains(trimmed, stub_factory)
        assert len(chains) == len(trimmed) - 1

    def test_single_node_tree_empty_library(self):
        goal = frozenset({("g",)})
        tree = ActionTree(root=goal)
        tree.add(goal, None, None, 0)
        assert build_controller_chains(tree, stub_factory) == []

    def test_path_tree_chains_are_suffixes(self):
        goal = frozenset({("g",)})
        tree = ActionTree(root=goal)
        tree.add(goal, None, None, 0)
        states = [goal]
        actions = []
        for k in range(3):
            a = GroundAction(
                f"a{k}",
                pre=frozenset({(f"p{k + 1}",)}),
                add=frozenset({(f"p{k}",)} if k else {("g",)}),
                delete=frozenset(),
            )
            s = frozenset({(f"p{k + 1}",)})
            tree.add(s, states[-1], a, k + 1)
            states.append(s)
            actions.append(a)
        chains = build_controller_chains(tree, stub_factory)
        assert [len(c.controllers) for c in chains] == [1, 2, 3]
        assert chains[0].controllers == ["a0"]
        assert chains[1].controllers == ["a1", "a0"]
        assert chains[2].controllers == ["a2", "a1", "a0"]

    def test_ordering_ascending_length_then_insertion(self):
        tree, _, _, cand = TestTrim.tower_tree()
        trimmed = trim_action_tree(tree, cand, 2)
        chains = build_controller_chains(trimmed, stub_factory)
        lengths = [len(c.controllers) for c in chains]
        assert lengths == sorted(lengths)


def random_blocks_domain(rng):
    """Random initial stacks and a random goal tower over 3-5 blocks."""
    n = int(rng.integers(3, 6))
    objects, names = blocks_objects(n)
    actions = ground_actions(blocks_schemas(), objects)
    order = list(rng.permutation(names))
    atoms = {("empty",)}
    stacks = []
    current = []
    for name in order:
        if current and rng.random() < 0.5:
            current.append(name)
        else:
            current = [name]
            stacks.append(current)
    for stack in stacks:
        atoms.add(("on_table", stack[0]))
        for below, above in zip(stack, stack[1:]):
            atoms.add(("on", above, below))
        atoms.add(("free", stack[-1]))
    init = frozenset(atoms)
    tower = list(rng.permutation(names))[: int(rng.integers(2, min(n, 4) + 1))]
    goal = frozenset(("on", a, b) for a, b in zip(tower[:-1], tower[1:]))
    return init, goal, actions, objects


def test_randomized_blocksworld_against_bfs_oracle():
    rng = np.random.default_rng(12345)
    solved = 0
    for _ in range(10):
        init, goal, actions, objects = random_blocks_domain(rng)
        j = 2
        tree, plan, d_i, cand = gen_blocks_tree(goal, init, actions, objects, explore=j)
        oracle = bfs_shortest_plan(init, goal, actions)
        if oracle is None:
            assert plan is None
            continue
        solved += 1
        assert plan is not None, (init, goal)
        assert len(plan) == oracle
        assert max(n.depth for n in tree.nodes.values()) <= d_i + j
        trimmed = trim_action_tree(tree, cand, 2)
        chains = build_controller_chains(trimmed, stub_factory)
        assert len(chains) == len(trimmed) - 1
        for s in trimmed.nodes:
            ok, _ = forward_verify(s, trimmed)
            assert ok  # regression soundness on blocks world
    assert solved >= 8  # the sampler overwhelmingly produces solvable cases
