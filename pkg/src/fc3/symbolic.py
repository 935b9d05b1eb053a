"""STRIPS-style goal regression: backward action tree, trimming, chain library.

Logic states are frozensets of ground atoms.  The backward search expands a
state with every relevant ground action (one that adds something the state
needs and deletes nothing it needs); the first popped state that holds in the
initial state and forward-verifies fixes the plan P, after which exploration
continues to depth d_I + j.  Trimming keeps states within undirected tree
distance r of the plan path; every non-root surviving node yields one
controller chain (its action path to the goal).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

Atom = tuple  # ("on", "green", "blue")


class SymbolicError(Exception):
    pass


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple = ()  # ((param, type), ...)
    pre: tuple = ()
    add: tuple = ()
    delete: tuple = ()
    distinct: bool = True  # ground bindings must not repeat an object


@dataclass(frozen=True)
class GroundAction:
    name: str
    pre: frozenset
    add: frozenset
    delete: frozenset
    schema: str = ""
    binding: tuple = ()

    def __str__(self):
        return self.name


def _substitute(atoms, binding: dict) -> frozenset:
    out = []
    for a in atoms:
        out.append(tuple(binding.get(t, t) for t in a))
    return frozenset(out)


def ground_actions(schemas, objects: dict) -> list:
    """All ground instances, in deterministic schema-by-schema binding order.

    objects maps object name -> type; schema parameters bind to objects of
    their type, without repetition when the schema demands distinct args.
    """
    by_type: dict = {}
    for name, typ in objects.items():
        by_type.setdefault(typ, []).append(name)
    out = []
    for schema in schemas:
        pools = []
        for _, typ in schema.params:
            if typ not in by_type:
                pools.append([])
            else:
                pools.append(by_type[typ])
        bindings = [()]
        for pool in pools:
            bindings = [b + (v,) for b in bindings for v in pool]
        for values in bindings:
            if schema.distinct and len(set(values)) != len(values):
                continue
            bind = {f"?{p}": v for (p, _), v in zip(schema.params, values)}
            add = _substitute(schema.add, bind)
            delete = _substitute(schema.delete, bind)
            if add & delete:
                raise SymbolicError(
                    f"{schema.name}{values}: add and delete effects overlap: {sorted(add & delete)}"
                )
            out.append(
                GroundAction(
                    name=f"{schema.name}({','.join(values)})" if values else f"{schema.name}()",
                    pre=_substitute(schema.pre, bind),
                    add=add,
                    delete=delete,
                    schema=schema.name,
                    binding=values,
                )
            )
    return out


def regress(action: GroundAction, state: frozenset):
    """Backward step through a relevant action; None when not relevant."""
    if not (state & action.add) or (state & action.delete):
        return None
    return frozenset((state - action.add) | action.pre)


@dataclass(frozen=True)
class MutexGroup:
    """At-most-one-of template: ?params bind per object type, '*' matches any object."""

    params: tuple = ()  # ((param, type), ...)
    atoms: tuple = ()


def ground_mutex_groups(groups, objects: dict) -> list:
    """Expand mutex templates into ground atom groups (|state & group| <= 1)."""
    names = list(objects)
    by_type: dict = {}
    for name, typ in objects.items():
        by_type.setdefault(typ, []).append(name)
    out = []
    for group in groups:
        bindings = [()]
        for _, typ in group.params:
            bindings = [b + (v,) for b in bindings for v in by_type.get(typ, [])]
        for values in bindings:
            bind = {f"?{p}": v for (p, _), v in zip(group.params, values)}
            atoms = set()
            for a in group.atoms:
                partial = [tuple(bind.get(t, t) for t in a)]
                for i, t in enumerate(a):
                    if t == "*":
                        partial = [p[:i] + (n,) + p[i + 1 :] for p in partial for n in names]
                atoms.update(partial)
            out.append(frozenset(atoms))
    return out


def make_consistency_checker(groups):
    """Requirement sets violating an at-most-one group are unreachable."""
    ground_groups = [frozenset(g) for g in groups]
    atom_to_groups: dict = {}
    for gi, g in enumerate(ground_groups):
        for a in g:
            atom_to_groups.setdefault(a, []).append(gi)

    def consistent(state: frozenset) -> bool:
        counts: dict = {}
        for a in state:
            for gi in atom_to_groups.get(a, ()):
                c = counts.get(gi, 0) + 1
                if c > 1:
                    return False
                counts[gi] = c
        return True

    return consistent


@dataclass
class TreeNode:
    state: frozenset
    parent: frozenset | None
    action: GroundAction | None  # edge toward the parent (executed first forward)
    depth: int


@dataclass
class ActionTree:
    root: frozenset
    nodes: dict = field(default_factory=dict)  # state -> TreeNode, insertion-ordered
    children: dict = field(default_factory=dict)

    def add(self, state, parent, action, depth):
        self.nodes[state] = TreeNode(state, parent, action, depth)
        self.children.setdefault(state, [])
        if parent is not None:
            self.children.setdefault(parent, []).append(state)

    def path_actions(self, state) -> list:
        """Forward plan from a node: its edge actions walking up to the root."""
        out = []
        node = self.nodes[state]
        while node.parent is not None:
            out.append(node.action)
            node = self.nodes[node.parent]
        return out

    def depth(self, state) -> int:
        return self.nodes[state].depth

    def __len__(self):
        return len(self.nodes)


def forward_verify(state: frozenset, tree: ActionTree):
    """Execute the node's action path forward; ok iff it reaches the goal."""
    plan = tree.path_actions(state)
    s = set(state)
    for action in plan:
        if not action.pre <= s:
            return False, plan
        s = (s - action.delete) | action.add
    return tree.root <= s, plan


def generate_action_tree(goal, init, actions, explore: int, max_nodes: int = 200000, consistent=None):
    """Backward breadth-first expansion from the goal state.

    Returns (tree, plan, d_I, candidate): plan is the first (shortest)
    forward-verified plan whose required atoms all hold initially; expansion
    continues to depth d_I + explore.  plan is None when no candidate exists.
    `consistent` prunes requirement sets that violate domain invariants.
    """
    goal = frozenset(goal)
    init = frozenset(init)
    tree = ActionTree(root=goal)
    tree.add(goal, None, None, 0)
    queue = deque([goal])
    plan = None
    candidate = None
    d_i = 0
    while queue:
        state = queue.popleft()
        depth = tree.depth(state)
        if plan is None and state <= init:
            ok, fwd = forward_verify(state, tree)
            if ok:
                plan = fwd
                candidate = state
                d_i = depth
        if plan is not None and depth >= d_i + explore:
            continue  # children would exceed the explore bound
        for action in actions:
            nxt = regress(action, state)
            if nxt is None or nxt in tree.nodes:
                continue
            if consistent is not None and not consistent(nxt):
                continue
            if len(tree) >= max_nodes:
                queue.clear()
                break
            tree.add(nxt, state, action, depth + 1)
            queue.append(nxt)
    if plan is not None:
        # States queued speculatively before the plan was known may sit beyond
        # the bound; the tree is truncated at depth d_I + explore.
        keep = {s for s, n in tree.nodes.items() if n.depth <= d_i + explore}
        if len(keep) != len(tree):
            pruned = ActionTree(root=tree.root)
            for s, n in tree.nodes.items():
                if s in keep:
                    pruned.add(s, n.parent, n.action, n.depth)
            tree = pruned
    return tree, plan, d_i, candidate


def trim_action_tree(tree: ActionTree, candidate, radius: int) -> ActionTree:
    """Keep states within undirected tree distance `radius` of the plan path."""
    if candidate is None or candidate not in tree.nodes:
        raise SymbolicError("trim requires a verified plan node")
    path = [candidate]
    node = tree.nodes[candidate]
    while node.parent is not None:
        path.append(node.parent)
        node = tree.nodes[node.parent]
    dist = {s: 0 for s in path}
    frontier = deque(path)
    while frontier:
        s = frontier.popleft()
        if dist[s] == radius:
            continue
        node = tree.nodes[s]
        neighbors = list(tree.children.get(s, []))
        if node.parent is not None:
            neighbors.append(node.parent)
        for nb in neighbors:
            if nb not in dist:
                dist[nb] = dist[s] + 1
                frontier.append(nb)
    out = ActionTree(root=tree.root)
    for state, node in tree.nodes.items():  # insertion order is preserved
        if state in dist:
            out.add(state, node.parent, node.action, node.depth)
    return out


def build_controller_chains(tree: ActionTree, chain_factory) -> list:
    """One chain per non-root node: its forward action path to the goal.

    chain_factory(actions, node_state) builds the executable chain for a
    forward plan; nodes whose path does not forward-verify are dropped.
    Chains are ordered by ascending controller count, ties by tree insertion
    order (the selection priority downstream).
    """
    chains = []
    for order, (state, node) in enumerate(tree.nodes.items()):
        if node.parent is None and node.action is None and state == tree.root:
            continue
        ok, plan = forward_verify(state, tree)
        if not ok:
            continue
        chain = chain_factory(plan, state)
        if chain is not None:
            chains.append((len(chain.controllers), order, chain))
    chains.sort(key=lambda t: (t[0], t[1]))
    return [c for _, _, c in chains]
