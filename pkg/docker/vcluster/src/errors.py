from __future__ import annotations


class VClusterError(Exception):
    """Base class for every orchestrator error."""


class ConfigValidationError(VClusterError, ValueError):
    def __init__(self, *, context: str, problems: list[str]):
        super().__init__("; ".join(problems))
        self.context = context
        self.problems = problems

    def format(self) -> str:
        lines = [f"[config] validation failed: {self.context}"]
        for p in self.problems:
            lines.append(f"- {p}")
        return "\n".join(lines)


class IllegalTransition(VClusterError):
    def __init__(self, from_state: object, to_state: object):
        super().__init__(f"illegal transition {from_state} -> {to_state}")
        self.from_state = from_state
        self.to_state = to_state


class MalformedLog(VClusterError):
    pass


class JobTooLarge(ConfigValidationError):
    def __init__(self, *, job_id: str, node_count: int, max_nodes: int):
        super().__init__(
            context=f"job {job_id}",
            problems=[f"node_count {node_count} exceeds max_nodes {max_nodes}"],
        )
        self.job_id = job_id
        self.node_count = node_count
        self.max_nodes = max_nodes


class NotRunning(VClusterError):
    pass


class UnknownJob(VClusterError):
    pass


class ProviderError(VClusterError):
    """Transient provider failure; retried by the autoscaler."""


class CapacityExceeded(ProviderError):
    pass


class ProviderUnavailable(VClusterError):
    pass


class UnknownInstance(VClusterError):
    pass


class UnmappedName(ConfigValidationError):
    def __init__(self, logical: str, *, context: str = "profile"):
        super().__init__(context=context, problems=[f"no mapping for logical name '{logical}'"])
        self.logical = logical


class MissingInput(VClusterError):
    def __init__(self, digest: str):
        super().__init__(f"input {digest} is not realized in the store")
        self.digest = digest


class NameCollision(VClusterError):
    def __init__(self, name: str, digest_a: str, digest_b: str):
        super().__init__(f"'{name}' resolves to both {digest_a} and {digest_b}")
        self.name = name
        self.digest_a = digest_a
        self.digest_b = digest_b


class UnknownImage(VClusterError):
    pass


class IncompatibleMpi(ConfigValidationError):
    def __init__(self, reason: str, *, context: str = "mpi"):
        super().__init__(context=context, problems=[reason])
        self.reason = reason


class Infeasible(ConfigValidationError):
    def __init__(self, reason: str):
        super().__init__(context="hpl input", problems=[reason])


class ParseError(VClusterError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class NonpositiveRmax(ConfigValidationError):
    def __init__(self, rmax_gflops: float):
        super().__init__(context="efficiency", problems=[f"rmax must be > 0, got {rmax_gflops}"])


class SimulationStalled(VClusterError):
    """The virtual clock passed the horizon before the cluster settled."""
