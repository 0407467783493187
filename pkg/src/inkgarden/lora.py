"""Low-rank adaptation of frozen linear projections.

An adapter attaches a rank-r pair (A: r x d_in, B: d_out x r) to one frozen
weight W; the wrapped projection computes W x + (alpha/r) B (A x).  B starts
at zero so injection never changes model outputs, and only adapter tensors
train while every base parameter stays byte-stable.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from fnmatch import fnmatch
from pathlib import Path

import numpy as np

from .errors import AdapterStateError, AdapterTargetError, FrozenParameterError
from .nn import Linear, Module, assign_names
from .tensor import Parameter, Tensor

DEFAULT_TARGET_PATTERNS = (
    "*.cross.q.weight",
    "*.cross.k.weight",
    "*.cross.v.weight",
    "*.cross.out.weight",
)

ADAPTER_MAGIC = b"LORA"
ADAPTER_VERSION = 1


@dataclass
class LoraAdapter:
    target_name: str
    A: Parameter
    B: Parameter
    rank: int
    alpha: float
    merged: bool = False

    @property
    def scale(self):
        return self.alpha / self.rank

    def delta(self):
        """The effective update (alpha/r) B A, shaped like the wrapped weight."""
        return self.scale * (self.B.value.data @ self.A.value.data)

    def scalar_count(self):
        return self.A.value.size + self.B.value.size


@dataclass
class LoraState:
    adapters: list
    frozen_names: set
    trainable_names: set
    linears: dict = field(default_factory=dict)  # target weight name -> Linear
    merged: bool = False


def _owning_linears(model: Module, root_name: str):
    owners = {}
    for mod_name, mod in model.named_modules(root_name):
        if isinstance(mod, Linear):
            owners[f"{mod_name}.weight"] = mod
    return owners


def inject(model: Module, root_name: str, patterns=DEFAULT_TARGET_PATTERNS, rank=4, alpha=None, seed=0) -> LoraState:
    """Attach adapters to every parameter matching the name patterns.

    Matched weights must be 2-d Linear weights; every pattern must match at
    least one parameter and no target may already carry an adapter.  After
    injection, adapter tensors are the only trainable parameters in the model.
    """
    if alpha is None:
        alpha = float(rank)
    owners = _owning_linears(model, root_name)
    all_params = dict(model.named_parameters(root_name))
    matched = []
    for pattern in patterns:
        hits = [name for name in all_params if fnmatch(name, pattern)]
        if not hits:
            raise AdapterTargetError(f"pattern '{pattern}' matched no parameters")
        matched.extend(hits)
    # preserve first-seen order, drop duplicates across overlapping patterns
    seen = set()
    targets = [n for n in matched if not (n in seen or seen.add(n))]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed, 0xADA))))
    adapters = []
    linears = {}
    for name in targets:
        p = all_params[name]
        if p.value.data.ndim != 2:
            raise AdapterTargetError(f"target '{name}' is not a matrix (shape {p.value.data.shape})")
        linear = owners.get(name)
        if linear is None:
            raise AdapterTargetError(f"target '{name}' is not a Linear weight")
        if linear.adapter is not None:
            raise AdapterStateError(f"target '{name}' already carries an adapter")
        d_out, d_in = p.value.data.shape
        if rank > min(d_out, d_in):
            raise AdapterTargetError(f"rank {rank} exceeds min dim of '{name}' ({min(d_out, d_in)})")
        dtype = p.value.data.dtype  # adapters share the wrapped weight's precision
        a = Parameter(Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(dtype)))
        b = Parameter(Tensor(np.zeros((d_out, rank), dtype=dtype)))
        linear.lora_A = a
        linear.lora_B = b
        adapter = LoraAdapter(target_name=name, A=a, B=b, rank=rank, alpha=float(alpha))
        linear.adapter = adapter
        adapters.append(adapter)
        linears[name] = linear

    assign_names(model, root_name)
    frozen, trainable = set(), set()
    for name, p in model.named_parameters(root_name):
        is_adapter = name.endswith(".lora_A") or name.endswith(".lora_B")
        p.trainable = is_adapter
        (trainable if is_adapter else frozen).add(name)
    return LoraState(adapters=adapters, frozen_names=frozen, trainable_names=trainable, linears=linears)


def trainable_report(state: LoraState, model: Module, root_name: str):
    """Exact scalar counts for the adapter (theta) vs frozen base (phi0) split."""
    theta = sum(a.scalar_count() for a in state.adapters)
    phi0 = 0
    for name, p in model.named_parameters(root_name):
        if name in state.frozen_names:
            phi0 += p.value.size
    return {"theta_count": theta, "phi0_count": phi0, "ratio": theta / phi0 if phi0 else float("inf")}


def merge(state: LoraState):
    """Fold every adapter into its base weight in place: W <- W + (alpha/r) B A."""
    if state.merged:
        raise AdapterStateError("adapters already merged")
    for adapter in state.adapters:
        w = state.linears[adapter.target_name].weight
        w.value.data += adapter.delta().astype(w.value.data.dtype)
        adapter.merged = True
    state.merged = True
    return state


def unmerge(state: LoraState):
    if not state.merged:
        raise AdapterStateError("unmerge without a prior merge")
    for adapter in state.adapters:
        w = state.linears[adapter.target_name].weight
        w.value.data -= adapter.delta().astype(w.value.data.dtype)
        adapter.merged = False
    state.merged = False
    return state


def parameter_checksums(model: Module, root_name: str, names=None):
    sums = {}
    for name, p in model.named_parameters(root_name):
        if names is None or name in names:
            sums[name] = hashlib.sha256(p.value.data.tobytes()).hexdigest()
    return sums


def verify_finetune_contract(before: dict, model: Module, root_name: str, state: LoraState):
    """After fine-tuning: every frozen tensor byte-identical, >=1 adapter changed.

    `before` maps parameter name -> sha256 taken before training.  Frozen
    drift raises naming the parameter; the returned record carries the
    changed-adapter names.
    """
    after = parameter_checksums(model, root_name)
    for name in sorted(state.frozen_names):
        if after[name] != before[name]:
            raise FrozenParameterError(f"frozen parameter '{name}' changed during fine-tuning")
    changed = [n for n in sorted(state.trainable_names) if after[n] != before[n]]
    return {"frozen_ok": True, "changed_adapters": changed, "any_adapter_changed": bool(changed)}


# -- adapter files -------------------------------------------------------

def save_adapters(state: LoraState, path):
    """Standalone adapter file: header (magic, version, count) then per-adapter
    name, rank, alpha, dims, A and B as row-major little-endian float32."""
    if state.merged:
        raise AdapterStateError("refusing to save while merged into base weights")
    with Path(path).open("wb") as f:
        f.write(ADAPTER_MAGIC)
        f.write(struct.pack("<II", ADAPTER_VERSION, len(state.adapters)))
        for a in state.adapters:
            name_bytes = a.target_name.encode("utf-8")
            d_out, r = a.B.value.data.shape
            _, d_in = a.A.value.data.shape
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<IdII", a.rank, a.alpha, d_in, d_out))
            f.write(np.ascontiguousarray(a.A.value.data, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(a.B.value.data, dtype="<f4").tobytes())


def load_adapter_arrays(path):
    raw = Path(path).read_bytes()
    if raw[:4] != ADAPTER_MAGIC:
        raise AdapterStateError(f"{path} is not an adapter file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != ADAPTER_VERSION:
        raise AdapterStateError(f"unsupported adapter file version {version}")
    offset = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rank, alpha, d_in, d_out = struct.unpack_from("<IdII", raw, offset)
        offset += struct.calcsize("<IdII")
        a = np.frombuffer(raw, dtype="<f4", count=rank * d_in, offset=offset).reshape(rank, d_in)
        offset += 4 * rank * d_in
        b = np.frombuffer(raw, dtype="<f4", count=d_out * rank, offset=offset).reshape(d_out, rank)
        offset += 4 * d_out * rank
        entries.append({"target_name": name, "rank": rank, "alpha": alpha, "A": a.copy(), "B": b.copy()})
    return entries


def apply_adapter_arrays(model: Module, root_name: str, entries) -> LoraState:
    """Attach adapters loaded from a file to an un-injected model."""
    owners = _owning_linears(model, root_name)
    adapters = []
    linears = {}
    for e in entries:
        linear = owners.get(e["target_name"])
        if linear is None:
            raise AdapterTargetError(f"checkpointed adapter target '{e['target_name']}' not in model")
        if linear.adapter is not None:
            raise AdapterStateError(f"target '{e['target_name']}' already carries an adapter")
        dtype = linear.weight.value.data.dtype
        a = Parameter(Tensor(e["A"].astype(dtype)))
        b = Parameter(Tensor(e["B"].astype(dtype)))
        linear.lora_A = a
        linear.lora_B = b
        adapter = LoraAdapter(e["target_name"], a, b, int(e["rank"]), float(e["alpha"]))
        linear.adapter = adapter
        adapters.append(adapter)
        linears[e["target_name"]] = linear
    assign_names(model, root_name)
    frozen, trainable = set(), set()
    for name, p in model.named_parameters(root_name):
        is_adapter = name.endswith(".lora_A") or name.endswith(".lora_B")
        p.trainable = is_adapter
        (trainable if is_adapter else frozen).add(name)
    return LoraState(adapters=adapters, frozen_names=frozen, trainable_names=trainable, linears=linears)
