"""
Influence diagrams of simulation experiments: manipulable parameters feed distributions and functionals, which feed
a single outcome node. Path and blocking-set queries are purely topological.
"""
import dataclasses
import enum
import functools
import itertools
import typing

import networkx as nx  # type: ignore

from causal_simulation.errors import ValidationError
from causal_simulation.scm_core import split_parameter

Path = typing.Tuple[str, ...]


class NodeKind(enum.Enum):
    MANIPULABLE_PARAMETER = 'manipulable_parameter'
    DISTRIBUTION = 'distribution'
    FUNCTIONAL = 'functional'
    OUTCOME = 'outcome'


@dataclasses.dataclass(frozen=True)
class DiagramNode:
    id: str
    kind: NodeKind
    label: str


@dataclasses.dataclass(frozen=True)
class DiagramEdge:
    source: str
    target: str
    deterministic: bool = False


@dataclasses.dataclass(frozen=True)
class InfluenceDiagram:
    nodes: typing.Tuple[DiagramNode, ...]
    edges: typing.Tuple[DiagramEdge, ...]

    def __post_init__(self) -> None:
        ids = [node.id for node in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"Node ids must be unique: {sorted(i for i in ids if ids.count(i) > 1)}")
        for edge in self.edges:
            if edge.source not in ids or edge.target not in ids:
                raise ValidationError(f"Edge {edge.source} -> {edge.target} references an unknown node")
        if not nx.is_directed_acyclic_graph(self.graph):
            raise ValidationError(f"Influence diagram has a cycle: {nx.find_cycle(self.graph)}")
        for node in self.nodes:
            if node.kind == NodeKind.MANIPULABLE_PARAMETER and self.graph.in_degree(node.id) > 0:
                raise ValidationError(f"Manipulable parameter {node.id!r} may not have parents")

    @functools.cached_property
    def graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for node in self.nodes:
            graph.add_node(node.id, kind=node.kind, label=node.label)
        for edge in self.edges:
            graph.add_edge(edge.source, edge.target, deterministic=edge.deterministic)
        return graph

    def node(self, node_id: str) -> DiagramNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise ValidationError(f"Unknown node {node_id!r}")

    @property
    def outcome(self) -> str:
        outcomes = [node.id for node in self.nodes if node.kind == NodeKind.OUTCOME]
        if len(outcomes) != 1:
            raise ValidationError(f"Expected exactly one outcome node, found {outcomes}")
        return outcomes[0]

    def without(self, removed: typing.Iterable[str]) -> 'InfluenceDiagram':
        removed = set(removed)
        return InfluenceDiagram(
            nodes=tuple(node for node in self.nodes if node.id not in removed),
            edges=tuple(edge for edge in self.edges if edge.source not in removed and edge.target not in removed),
        )


@dataclasses.dataclass(frozen=True)
class PathReport:
    treatment: str
    outcome: str
    direct_paths: typing.Tuple[Path, ...]
    indirect_paths: typing.Tuple[Path, ...]
    confounding_paths: typing.Tuple[Path, ...]


def _check_nodes(diagram: InfluenceDiagram, *node_ids: str) -> None:
    for node_id in node_ids:
        diagram.node(node_id)


def causal_paths(diagram: InfluenceDiagram, source: str, outcome: str) -> typing.List[Path]:
    _check_nodes(diagram, source, outcome)
    if source == outcome:
        return [(source,)]
    return sorted(tuple(path) for path in nx.all_simple_paths(diagram.graph, source, outcome))


def path_report(diagram: InfluenceDiagram, treatment: str, outcome: str) -> PathReport:
    """
    Classify treatment -> outcome paths as direct (single edge) or indirect, and list confounding paths: directed paths
    to the outcome from root nodes that also reach the treatment or one of its mediators, avoiding the treatment.
    """
    paths = causal_paths(diagram, treatment, outcome)
    mediators = {node for path in paths for node in path[1:-1]}
    affected = mediators | {treatment}
    graph = diagram.graph
    confounding: typing.List[Path] = []
    for root in sorted(node for node in graph.nodes if graph.in_degree(node) == 0 and node != treatment):
        if not nx.descendants(graph, root) & affected:
            continue
        blocked = graph.subgraph(set(graph.nodes) - {treatment})
        confounding.extend(tuple(path) for path in nx.all_simple_paths(blocked, root, outcome))
    return PathReport(
        treatment=treatment,
        outcome=outcome,
        direct_paths=tuple(path for path in paths if len(path) == 2),
        indirect_paths=tuple(path for path in paths if len(path) > 2),
        confounding_paths=tuple(sorted(confounding)),
    )


def _requirements(diagram: InfluenceDiagram, treatment: str, outcome: str) -> typing.List[typing.FrozenSet[str]]:
    """Node sets that a blocking set must hit, one per path to intercept."""
    paths = causal_paths(diagram, treatment, outcome)
    requirements = [frozenset(path[1:-1]) for path in paths if len(path) > 2]
    affected = {node for path in paths for node in path[1:-1]}
    for node in diagram.nodes:
        if node.kind != NodeKind.MANIPULABLE_PARAMETER or node.id == treatment:
            continue
        other_paths = causal_paths(diagram, node.id, outcome)
        if any(affected & set(path[:-1]) for path in other_paths):
            requirements.extend(frozenset(path[:-1]) for path in other_paths)
    return requirements


def sufficient_blocking_sets(diagram: InfluenceDiagram, treatment: str, outcome: str, max_size: int) -> typing.List[typing.FrozenSet[str]]:
    """
    Node sets, up to max_size, intercepting every indirect treatment path and every path from another manipulable
    parameter whose route to the outcome crosses a treatment-affected node. Ranked by descending number of manipulable
    members, then size, then ids.
    """
    _check_nodes(diagram, treatment, outcome)
    if max_size < 1:
        raise ValidationError(f"max_size must be at least 1, got {max_size}")
    requirements = _requirements(diagram, treatment, outcome)
    if not requirements:
        return [frozenset()]
    if any(len(requirement) == 0 for requirement in requirements):
        return []

    forced = frozenset(node for requirement in requirements if len(requirement) == 1 for node in requirement)
    candidates = sorted({node for requirement in requirements for node in requirement} - forced - {treatment, outcome})
    pending = [requirement for requirement in requirements if not requirement & forced]

    found: typing.List[typing.FrozenSet[str]] = []
    for extra in range(0, max_size - len(forced) + 1):
        for combination in itertools.combinations(candidates, extra):
            chosen = set(combination)
            if all(requirement & chosen for requirement in pending):
                found.append(forced | chosen)

    manipulable = {node.id for node in diagram.nodes if node.kind == NodeKind.MANIPULABLE_PARAMETER}
    return sorted(found, key=lambda s: (-len(s & manipulable), len(s), sorted(s)))


def to_adjacency_text(diagram: InfluenceDiagram) -> str:
    lines = []
    for node in sorted(diagram.nodes, key=lambda node: node.id):
        children = sorted(diagram.graph.successors(node.id))
        rendered = [f"{child} (deterministic)" if diagram.graph.edges[node.id, child]['deterministic'] else child for child in children]
        lines.append(f"{node.id} [{node.kind.value}]: {', '.join(rendered)}")
    return '\n'.join(lines) + '\n'


_DOT_SHAPES = {
    NodeKind.MANIPULABLE_PARAMETER: 'box',
    NodeKind.DISTRIBUTION: 'ellipse',
    NodeKind.FUNCTIONAL: 'diamond',
    NodeKind.OUTCOME: 'doubleoctagon',
}


def to_dot(diagram: InfluenceDiagram, name: str = 'influence_diagram') -> str:
    """Graphviz DOT; deterministic edges are drawn as double lines."""
    lines = [f'digraph {name} {{']
    for node in sorted(diagram.nodes, key=lambda node: node.id):
        lines.append(f'  "{node.id}" [label="{node.label}", shape={_DOT_SHAPES[node.kind]}];')
    for edge in sorted(diagram.edges, key=lambda edge: (edge.source, edge.target)):
        style = ' [color="black:invis:black", deterministic=true]' if edge.deterministic else ''
        lines.append(f'  "{edge.source}" -> "{edge.target}"{style};')
    lines.append('}')
    return '\n'.join(lines) + '\n'


def _diagram(
        nodes: typing.Sequence[typing.Tuple[str, NodeKind, str]],
        edges: typing.Sequence[typing.Tuple[str, str]],
        deterministic: typing.Sequence[typing.Tuple[str, str]] = (),
) -> InfluenceDiagram:
    return InfluenceDiagram(
        nodes=tuple(DiagramNode(id=i, kind=kind, label=label) for i, kind, label in nodes),
        edges=tuple(DiagramEdge(source=s, target=t) for s, t in edges) + tuple(DiagramEdge(source=s, target=t, deterministic=True) for s, t in deterministic),
    )


BIAS_AMP_OUTCOME = 'beta_hat'


def build_bias_amp_diagram() -> InfluenceDiagram:
    """Simulation of the bias-amplification experiment: ScmSpec parameters through the data distributions to the estimators."""
    param = NodeKind.MANIPULABLE_PARAMETER
    dist = NodeKind.DISTRIBUTION
    functional = NodeKind.FUNCTIONAL
    nodes = [
        ('var_x', param, 'σ_x²'), ('mu_x', param, 'μ_x'), ('var_u', param, 'σ_u²'), ('mu_u', param, 'μ_u'),
        ('var_eps_y', param, 'σ²_εy'), ('var_eps_a', param, 'σ²_εa'),
        ('beta_x', param, 'β_x'), ('gamma_x', param, 'γ_x'), ('beta_u', param, 'β_u'), ('gamma_u', param, 'γ_u'),
        ('alpha_a', param, 'α_a'), ('alpha_y', param, 'α_y'), ('beta_a', param, 'β_a'), ('n', param, 'n'),
        ('p_x', dist, 'P_X'), ('p_u', dist, 'P_U'), ('p_a_given_xu', dist, 'P_A|X,U'), ('p_y_given_axu', dist, 'P_Y|A,X,U'),
        ('p_a', dist, 'P_A'), ('p_y', dist, 'P_Y'),
        ('var_a', functional, 'σ_a²'), ('var_y', functional, 'σ_y²'),
        (BIAS_AMP_OUTCOME, NodeKind.OUTCOME, 'β̂_a(X), β̂_a(∅)'),
    ]
    edges = [
        ('mu_x', 'p_x'), ('var_x', 'p_x'), ('mu_u', 'p_u'), ('var_u', 'p_u'),
        ('gamma_x', 'p_a_given_xu'), ('gamma_u', 'p_a_given_xu'), ('var_eps_a', 'p_a_given_xu'), ('alpha_a', 'p_a_given_xu'),
        ('beta_u', 'p_y_given_axu'), ('beta_x', 'p_y_given_axu'), ('var_eps_y', 'p_y_given_axu'), ('alpha_y', 'p_y_given_axu'),
        ('beta_a', 'p_y_given_axu'),
        ('p_a_given_xu', 'p_a'), ('p_a_given_xu', 'p_y'), ('p_y_given_axu', 'p_y'),
        ('p_x', 'p_a'), ('p_x', 'p_y'), ('p_u', 'p_y'), ('p_u', 'p_a'),
        ('p_a', 'var_a'), ('p_y', 'var_y'),
        ('var_a', BIAS_AMP_OUTCOME), ('var_y', BIAS_AMP_OUTCOME),
        ('gamma_x', BIAS_AMP_OUTCOME), ('gamma_u', BIAS_AMP_OUTCOME), ('beta_u', BIAS_AMP_OUTCOME), ('beta_x', BIAS_AMP_OUTCOME),
        ('var_x', BIAS_AMP_OUTCOME), ('var_u', BIAS_AMP_OUTCOME), ('n', BIAS_AMP_OUTCOME),
    ]
    return _diagram(nodes, edges)


ESL_OUTCOME = 'relative_mse'


def build_esl_diagram() -> InfluenceDiagram:
    """Mean-function comparison at constant SNR; the noise level is a deterministic function of the signal."""
    nodes = [
        ('n', NodeKind.MANIPULABLE_PARAMETER, 'n'),
        ('p', NodeKind.MANIPULABLE_PARAMETER, 'p'),
        ('mu_x', NodeKind.FUNCTIONAL, 'μ(X)'),
        ('p_x', NodeKind.DISTRIBUTION, 'P_X'),
        ('p_y_given_x', NodeKind.DISTRIBUTION, 'P_Y|X'),
        ('var_mu', NodeKind.FUNCTIONAL, 'Var(μ(X))'),
        ('var_eps', NodeKind.FUNCTIONAL, 'σ_ε²'),
        ('snr', NodeKind.FUNCTIONAL, 'SNR'),
        (ESL_OUTCOME, NodeKind.OUTCOME, 'relative MSE'),
    ]
    edges = [
        ('n', ESL_OUTCOME), ('mu_x', 'p_y_given_x'), ('p', 'p_x'), ('p', 'mu_x'),
        ('var_eps', 'p_y_given_x'), ('var_eps', ESL_OUTCOME),
        ('p_x', 'var_mu'), ('p_x', ESL_OUTCOME), ('p_y_given_x', ESL_OUTCOME), ('snr', ESL_OUTCOME),
    ]
    deterministic = [('mu_x', 'var_mu'), ('var_mu', 'snr'), ('var_mu', 'var_eps'), ('var_eps', 'snr')]
    return _diagram(nodes, edges, deterministic)


def parameter_node(parameter: str) -> str:
    """Diagram node of an ScmSpec parameter name; vector components share their vector's node."""
    field, _ = split_parameter(parameter)
    return field
