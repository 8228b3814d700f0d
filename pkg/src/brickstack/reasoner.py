"""Structured prompting, the response contract, and the LLM-backed policy.

A prompt bundles six ordered components: environment snapshot, task memory,
role text, callable tool knowledge, a stepwise thinking chain, and the output
schema. Responses are strict JSON; waypoints are validated against the
workspace, tool calls against the registry. The pipeline recomputes every
gate locally, so a policy can never assert an unverified acceptance bit.
"""

import json
import math
from dataclasses import dataclass, field

import jsonschema

from .agents import Proposal, RulePolicy
from .checks import Tolerances, descriptors_for, run_tool
from .geometry import Pose
from .world import GripperCommand, SceneState, Waypoint, WorldConfig, canonical_json

ROLE_TEXTS = {
    1: "Pre-grasp positioning: move the end-effector above the target brick "
       "and align the gripper approach with the brick's grasp axis, keeping "
       "the approach path collision-free with clearance to every obstacle.",
    2: "Opening and descent: open the gripper wider than the brick and "
       "descend vertically to a graspable depth without touching sidewalls.",
    3: "Grasp closure: close the gripper on the brick and verify a stable "
       "two-finger contact with sufficient normal force.",
    4: "Safe lift: raise the held brick to the transit height and judge slip "
       "risk from the measured forces before travelling.",
    5: "Brick placement: carry the brick above its slot, descend until "
       "contact, and verify planar and yaw alignment within tolerance while "
       "avoiding collisions with the built structure.",
    6: "Grasp release: open to free the brick, let it settle, and retract to "
       "the ready pose along a collision-free path.",
}

THINKING_CHAINS = {
    1: ["Locate the assigned brick and read its pose and size.",
        "Choose the approach point above the brick top.",
        "Align the gripper yaw with the shorter horizontal brick axis.",
        "Check the transit path and the clearance budget before committing."],
    2: ["Compute the opening: brick width plus the grip margin.",
        "Confirm the opening is within the gripper limit.",
        "Descend straight down to mid-brick depth.",
        "Confirm the fingers never touch sidewalls on the way down."],
    3: ["Close until both fingers press the brick.",
        "Read both finger normal forces.",
        "Compare the achieved pose against the commanded descend pose.",
        "Accept only a firm, centered grasp."],
    4: ["Lift straight up to the safe height.",
        "Read the tangential load and summed normal forces.",
        "Apply the friction-cone test and the slip-speed threshold.",
        "On risk, release and restart from pre-grasp."],
    5: ["Fetch the slot pose for the assigned brick.",
        "Compensate the known in-hand offset when aiming.",
        "Transit at the safe height, then descend until contact.",
        "Measure contact gap, planar error, and yaw error.",
        "If misaligned, raise by the configured step, correct, and retry."],
    6: ["Open wider than the brick to release it.",
        "Let the brick settle and confirm it rests.",
        "Pop up above the stack.",
        "Retract to the ready pose along a checked path."],
}

TOOLS_BY_AGENT = {
    1: ["collision_free_path", "clearance", "reachable"],
    2: ["collision_free_path", "clearance"],
    3: ["grasp_stable"],
    4: ["slip_check"],
    5: ["placement_aligned", "goal_progress", "collision_free_path"],
    6: ["collision_free_path", "clearance"],
}

OUTPUT_SCHEMA = {
    "type": "object",
    "required": ["rationale", "action", "sigma", "memory_update"],
    "additionalProperties": False,
    "properties": {
        "rationale": {"type": "string"},
        "sigma": {"type": "integer", "enum": [0, 1]},
        "memory_update": {"type": "object"},
        "action": {
            "type": "object",
            "oneOf": [
                {
                    "required": ["type", "pose", "gripper", "phase"],
                    "properties": {
                        "type": {"const": "waypoint"},
                        "pose": {
                            "type": "object",
                            "required": ["t", "q"],
                            "properties": {
                                "t": {"type": "array", "minItems": 3, "maxItems": 3,
                                      "items": {"type": "number"}},
                                "q": {"type": "array", "minItems": 4, "maxItems": 4,
                                      "items": {"type": "number"}},
                            },
                        },
                        "gripper": {
                            "type": "object",
                            "required": ["command"],
                            "properties": {
                                "command": {"enum": ["hold", "open", "close"]},
                                "width": {"type": "number"},
                            },
                        },
                        "phase": {"type": "integer", "minimum": 1, "maximum": 6},
                    },
                },
                {
                    "required": ["type", "name", "args"],
                    "properties": {
                        "type": {"const": "tool_call"},
                        "name": {"type": "string"},
                        "args": {"type": "object"},
                    },
                },
            ],
        },
    },
}


class ReasonerError(ValueError):
    """Base for response-contract violations."""


class MalformedJsonError(ReasonerError):
    pass


class SchemaViolationError(ReasonerError):
    pass


class UnknownToolError(ReasonerError):
    pass


class OutOfBoundsPoseError(ReasonerError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    """The six ordered prompt components for one agent invocation."""

    environment: str
    memory: str
    role: str
    knowledge: tuple
    thinking_chain: tuple
    output_schema: dict

    def components(self) -> list[tuple[str, object]]:
        return [
            ("environment", self.environment),
            ("memory", self.memory),
            ("role", self.role),
            ("knowledge", self.knowledge),
            ("thinking_chain", self.thinking_chain),
            ("output_format", self.output_schema),
        ]

    def as_text(self) -> str:
        parts = []
        for i, (name, payload) in enumerate(self.components(), start=1):
            if name in ("knowledge",):
                body = canonical_json([dict(p) for p in payload])
            elif name == "thinking_chain":
                body = "\n".join(f"{j + 1}. {s}" for j, s in enumerate(payload))
            elif name == "output_format":
                body = canonical_json(payload)
            else:
                body = payload
            parts.append(f"## {i}. {name}\n{body}")
        return "\n\n".join(parts)

    def as_messages(self) -> list[dict]:
        return [
            {"role": "system",
             "content": "You control a parallel-jaw gripper stacking bricks. "
                        "Respond with a single JSON object matching the output "
                        "format; no prose outside JSON."},
            {"role": "user", "content": self.as_text()},
        ]


def build_prompt(agent_index: int, scene: SceneState, memory, tol: Tolerances) -> PromptBundle:
    """Assemble the six components; a pure function of its inputs."""
    if agent_index not in ROLE_TEXTS:
        raise ValueError(f"agent index {agent_index} out of range")
    env = {
        "scene": scene.to_jsonable(),
        "tolerances": tol.to_jsonable(),
        "surface_normals": {str(b.id): [0.0, 0.0, 1.0] for b in scene.bricks},
        "free_space": {
            "workspace": [[float(v) for v in row] for row in scene.workspace],
            "occupied": [b.id for b in scene.bricks],
        },
    }
    return PromptBundle(
        environment=canonical_json(env),
        memory=canonical_json(memory.to_jsonable()),
        role=ROLE_TEXTS[agent_index],
        knowledge=tuple(tuple(d.items()) for d in descriptors_for(TOOLS_BY_AGENT[agent_index])),
        thinking_chain=tuple(THINKING_CHAINS[agent_index]),
        output_schema=OUTPUT_SCHEMA,
    )


def build_merged_prompt(scene: SceneState, memory, tol: Tolerances) -> PromptBundle:
    """All six roles and thinking chains in one bundle (the ablation prompt)."""
    role = " ".join(ROLE_TEXTS[i] for i in range(1, 7))
    chain = tuple(s for i in range(1, 7) for s in THINKING_CHAINS[i])
    names = sorted({n for ns in TOOLS_BY_AGENT.values() for n in ns})
    env = {
        "scene": scene.to_jsonable(),
        "tolerances": tol.to_jsonable(),
        "surface_normals": {str(b.id): [0.0, 0.0, 1.0] for b in scene.bricks},
        "free_space": {
            "workspace": [[float(v) for v in row] for row in scene.workspace],
            "occupied": [b.id for b in scene.bricks],
        },
    }
    return PromptBundle(
        environment=canonical_json(env),
        memory=canonical_json(memory.to_jsonable()),
        role=role,
        knowledge=tuple(tuple(d.items()) for d in descriptors_for(names)),
        thinking_chain=chain,
        output_schema=OUTPUT_SCHEMA,
    )


@dataclass
class PolicyResponse:
    """Validated agent output: rationale, one action, acceptance bit, memory delta."""

    rationale: str
    action: dict
    sigma: int
    memory_update: dict

    def to_jsonable(self) -> dict:
        return {
            "rationale": self.rationale,
            "action": self.action,
            "sigma": self.sigma,
            "memory_update": self.memory_update,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_jsonable())

    @classmethod
    def from_json(cls, text: str, schema: dict | None = None,
                  workspace=None) -> "PolicyResponse":
        return parse_response(text, schema or OUTPUT_SCHEMA, workspace=workspace)


def parse_response(raw: str, schema: dict, workspace=None) -> PolicyResponse:
    """Strict JSON validation; each failure mode is a distinct error kind."""
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedJsonError(f"not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaViolationError(exc.message) from exc
    action = data["action"]
    if action["type"] == "waypoint":
        pose = action["pose"]
        q = pose["q"]
        norm = math.sqrt(sum(c * c for c in q))
        if abs(norm - 1.0) > 1e-6:
            raise OutOfBoundsPoseError(f"quaternion norm {norm:.6f} is not 1")
        if workspace is not None:
            t = pose["t"]
            lo, hi = workspace[0], workspace[1]
            if not all(lo[i] <= t[i] <= hi[i] for i in range(3)):
                raise OutOfBoundsPoseError(f"waypoint {t} outside workspace")
        if action["gripper"]["command"] == "open" and "width" not in action["gripper"]:
            raise SchemaViolationError("open command requires a width")
    else:
        from .checks import TOOL_DESCRIPTORS

        if action["name"] not in TOOL_DESCRIPTORS:
            raise UnknownToolError(f"unknown tool {action['name']!r}")
    return PolicyResponse(data["rationale"], action, data["sigma"], data["memory_update"])


def waypoint_from_action(action: dict) -> Waypoint:
    pose = Pose.from_jsonable(action["pose"])
    g = action["gripper"]
    if g["command"] == "hold":
        cmd = GripperCommand.hold()
    elif g["command"] == "open":
        cmd = GripperCommand.open_to(float(g["width"]))
    else:
        cmd = GripperCommand.close()
    return Waypoint(pose, cmd, action["phase"])


def waypoint_to_action(wp: Waypoint, sigma: int = 1, rationale: str = "") -> dict:
    g: dict = {"command": wp.command.kind}
    if wp.command.width is not None:
        g["width"] = wp.command.width
    return {
        "rationale": rationale or "proceed",
        "action": {"type": "waypoint", "pose": wp.target.to_jsonable(),
                   "gripper": g, "phase": wp.phase},
        "sigma": sigma,
        "memory_update": {},
    }


def rule_policy(agent_index: int, ctx, nominal_fn) -> PolicyResponse:
    """The deterministic reference response: the nominal waypoint, serialized."""
    wp = nominal_fn()
    return PolicyResponse(**waypoint_to_action(wp, rationale="rule nominal"))


# ---------------------------------------------------------------------------
# Transports: one HTTP chat adapter, one fully offline scripted mock.
# ---------------------------------------------------------------------------


@dataclass
class LlmConfig:
    endpoint: str = ""
    model: str = "generic-chat"
    token_env: str = "BRICKSTACK_LLM_TOKEN"
    timeout_s: float = 60.0
    temperature: float = 0.0
    max_tool_rounds: int = 8

    def to_jsonable(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_jsonable(cls, d: dict) -> "LlmConfig":
        return cls(**d)


class HttpChatTransport:
    """Generic chat-completion JSON over HTTP; no vendor-specific features."""

    def __init__(self, config: LlmConfig):
        self.config = config

    def send(self, messages: list[dict], meta: dict, echo_hint: str | None = None) -> str:
        import os

        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        }
        resp = requests.post(self.config.endpoint, json=payload, headers=headers,
                             timeout=self.config.timeout_s)
        resp.raise_for_status()
        body = resp.json()
        return body["choices"][0]["message"]["content"]


class MockTransport:
    """Scripted responses keyed by (cycle, agent, call index); offline tests.

    Unscripted keys echo the caller-provided nominal response, so a full
    trial runs against the mock with targeted overrides where a test wants a
    malformed reply, a bad waypoint, or a tool-call round.
    """

    def __init__(self, script: dict | None = None):
        self.script = dict(script or {})
        self.calls: list[tuple] = []

    def send(self, messages: list[dict], meta: dict, echo_hint: str | None = None) -> str:
        key = (meta["cycle"], meta["agent"], meta["call"])
        self.calls.append(key)
        if key in self.script:
            entry = self.script[key]
            return entry(messages, meta) if callable(entry) else entry
        if echo_hint is None:
            raise RuntimeError(f"mock has no script for {key} and no echo hint")
        return echo_hint


class LlmPolicy:
    """Policy backed by a chat endpoint with a bounded tool-call loop.

    The model may alternate tool calls and re-queries up to the round budget;
    the final waypoint is validated and the pipeline recomputes the gate
    locally. Transport failures, unparseable output after one re-prompt, or
    budget exhaustion fall back to the rule policy for that step and are
    recorded as fallback events in the log entry.
    """

    name = "llm"

    def __init__(self, transport, llm_config: LlmConfig | None = None):
        self.transport = transport
        self.config = llm_config or LlmConfig()
        self.fallbacks: list[dict] = []
        self.reprompts: list[tuple] = []

    def propose(self, agent_index: int, ctx, nominal_fn) -> Proposal:
        perceived = ctx.perceived()
        bundle = build_prompt(agent_index, perceived, ctx.memory, ctx.tol)
        messages = bundle.as_messages()
        nominal_wp = nominal_fn()
        echo = canonical_json(waypoint_to_action(nominal_wp, rationale="nominal"))
        call = 0
        reprompted = False
        rounds = 0
        while True:
            call += 1
            if rounds >= self.config.max_tool_rounds:
                return self._fallback(ctx, agent_index, nominal_wp, "tool round budget exhausted")
            meta = {"cycle": ctx.memory.cycle, "agent": agent_index, "call": call}
            try:
                raw = self.transport.send(messages, meta, echo_hint=echo)
            except Exception as exc:
                return self._fallback(ctx, agent_index, nominal_wp, f"transport failure: {exc}")
            try:
                resp = parse_response(raw, bundle.output_schema,
                                      workspace=ctx.scene.workspace)
            except ReasonerError as exc:
                if not reprompted:
                    reprompted = True
                    self.reprompts.append((ctx.memory.cycle, agent_index))
                    messages = messages + [
                        {"role": "assistant", "content": raw},
                        {"role": "user",
                         "content": f"Response rejected ({exc}). Reply again with "
                                    "one valid JSON object per the output format."},
                    ]
                    continue
                return self._fallback(ctx, agent_index, nominal_wp,
                                      f"unparseable after re-prompt: {exc}")
            if resp.action["type"] == "tool_call":
                rounds += 1
                try:
                    result = run_tool(resp.action["name"], resp.action["args"],
                                      perceived, ctx.goal, ctx.tol, ctx.config)
                except Exception as exc:
                    return self._fallback(ctx, agent_index, nominal_wp,
                                          f"tool call failed: {exc}")
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user",
                     "content": "tool_result " + canonical_json(result.to_jsonable())},
                ]
                continue
            wp = waypoint_from_action(resp.action)
            return Proposal(wp, rationale=resp.rationale, source="llm",
                            claimed_sigma=resp.sigma)

    def _fallback(self, ctx, agent_index: int, nominal_wp, reason: str) -> Proposal:
        event = {"cycle": ctx.memory.cycle, "agent": agent_index, "reason": reason}
        self.fallbacks.append(event)
        return Proposal(nominal_wp, rationale=f"fallback to rules: {reason}",
                        source="fallback")


class SingleAgentPolicy:
    """Ablation: one merged prompt per waypoint, no stage gating upstream.

    The offline variant (no transport) reproduces the rule proposals; with a
    transport it sends the merged bundle instead of the per-stage one.
    """

    name = "single_agent"

    def __init__(self, transport=None, llm_config: LlmConfig | None = None):
        self.transport = transport
        self.config = llm_config or LlmConfig()

    def propose(self, agent_index: int, ctx, nominal_fn) -> Proposal:
        nominal_wp = nominal_fn()
        if self.transport is None:
            return Proposal(nominal_wp, rationale="single-agent rule variant",
                            source="single_agent")
        bundle = build_merged_prompt(ctx.perceived(), ctx.memory, ctx.tol)
        echo = canonical_json(waypoint_to_action(nominal_wp, rationale="nominal"))
        meta = {"cycle": ctx.memory.cycle, "agent": agent_index, "call": 1}
        try:
            raw = self.transport.send(bundle.as_messages(), meta, echo_hint=echo)
            resp = parse_response(raw, bundle.output_schema, workspace=ctx.scene.workspace)
            if resp.action["type"] == "waypoint":
                return Proposal(waypoint_from_action(resp.action),
                                rationale=resp.rationale, source="single_agent")
        except Exception:
            pass
        return Proposal(nominal_wp, rationale="single-agent fallback", source="single_agent")
