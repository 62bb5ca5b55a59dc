"""Differentiable substrate: checked primitives, gradient maps, Adam, tensor files.

Reverse-mode differentiation is delegated to torch autograd.  The model calls
the activation wrappers defined here (``sigmoid``, ``tanh``, ``relu``,
``softmax``) so a gradient fault can be injected for a single primitive kind
with :func:`corrupt_gradient` when exercising the gradient checker.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

_DTYPES = {32: torch.float32, 64: torch.float64}
_NAMES = {torch.float32: "float32", torch.float64: "float64"}

STRICT = False  # when True every wrapped activation is checked for non-finite output


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def dtype_for(bits: int) -> torch.dtype:
    try:
        return _DTYPES[bits]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {bits}") from None


def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.utils.deterministic.fill_uninitialized_memory = False


_IMPL: dict[str, Callable] = {
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "relu": torch.relu,
    "softmax": lambda x: torch.softmax(x, dim=-1),
}


def _checked(kind, out):
    if STRICT and not torch.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    return out


def sigmoid(x):
    return _checked("sigmoid", _IMPL["sigmoid"](x))


def tanh(x):
    return _checked("tanh", _IMPL["tanh"](x))


def relu(x):
    return _checked("relu", _IMPL["relu"](x))


def softmax(x):
    return _checked("softmax", _IMPL["softmax"](x))


@contextlib.contextmanager
def corrupt_gradient(kind: str, factor: float = 1.05):
    """Temporarily scale the backward pass of one activation kind by ``factor``."""
    fwd = _IMPL[kind]

    class _Faulty(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            with torch.enable_grad():
                xd = x.detach().requires_grad_(True)
                y = fwd(xd)
            ctx.save_for_backward(xd, y)
            return y.detach()

        @staticmethod
        def backward(ctx, g):
            xd, y = ctx.saved_tensors
            (gx,) = torch.autograd.grad(y, xd, g)
            return gx * factor

    _IMPL[kind] = _Faulty.apply
    try:
        yield
    finally:
        _IMPL[kind] = fwd


def _shape(t):
    return tuple(t.shape)


def _need_ndim(kind, t, ndims):
    if t.dim() not in ndims:
        raise ShapeError(f"{kind}: expected {'/'.join(map(str, ndims))}-d input, got shape {_shape(t)}")


def primitive_forward(kind: str, *inputs, axis: int = 0, index: int | None = None) -> torch.Tensor:
    """Evaluate one primitive with shape validation and a finiteness check.

    Supported kinds: matmul, add, sub, concat, mul, scale, sigmoid, tanh,
    relu, softmax, gather_row, mean, norm.  ``scale`` takes a tensor and a
    Python float; ``gather_row`` takes a matrix and ``index``.
    """
    xs = list(inputs)
    if kind == "matmul":
        a, b = xs
        _need_ndim(kind, a, (1, 2))
        _need_ndim(kind, b, (1, 2))
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {_shape(a)} and {_shape(b)} do not conform")
        out = a @ b
    elif kind in ("add", "sub", "mul"):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes {_shape(a)} and {_shape(b)} differ")
        out = {"add": torch.add, "sub": torch.sub, "mul": torch.mul}[kind](a, b)
    elif kind == "scale":
        a, c = xs
        out = a * float(c)
    elif kind == "concat":
        if not xs:
            raise ShapeError("concat: no inputs")
        ref = xs[0]
        for t in xs[1:]:
            if t.dim() != ref.dim() or any(
                t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis % ref.dim()
            ):
                raise ShapeError(f"concat: shapes {[_shape(t) for t in xs]} incompatible on axis {axis}")
        out = torch.cat(xs, dim=axis)
    elif kind in _IMPL:
        (a,) = xs
        if kind == "softmax":
            _need_ndim(kind, a, (1, 2))
        out = _IMPL[kind](a)
    elif kind == "gather_row":
        (a,) = xs
        _need_ndim(kind, a, (2,))
        if index is None or not 0 <= index < a.shape[0]:
            raise ShapeError(f"gather_row: index {index} out of range for shape {_shape(a)}")
        out = a[index]
    elif kind == "mean":
        (a,) = xs
        out = a.mean(dim=axis) if a.dim() > 1 else a.mean()
    elif kind == "norm":
        (a,) = xs
        _need_ndim(kind, a, (1,))
        out = torch.linalg.vector_norm(a)
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"{kind} on shapes {[_shape(t) for t in xs if torch.is_tensor(t)]} is non-finite")
    return out


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor], retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` for every tensor in ``params``.

    Parameters the loss does not reach get zero gradients.  Pass
    ``retain_graph=True`` to differentiate several losses sharing one graph.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    names = [k for k, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [params[k] for k in names], allow_unused=True, retain_graph=retain_graph)
    out = {}
    for k, g in zip(names, grads):
        out[k] = torch.zeros_like(params[k]) if g is None else g
    for k, p in params.items():
        out.setdefault(k, torch.zeros_like(p))
    return out


def make_adam(params: Mapping[str, torch.Tensor], lr: float) -> torch.optim.Adam:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return torch.optim.Adam(list(params.values()), lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], opt: torch.optim.Adam):
    """One bias-corrected Adam update, in place."""
    missing = [k for k, p in params.items() if p.requires_grad and k not in grads]
    if missing:
        raise KeyError(f"no gradient for {missing}")
    for k, p in params.items():
        p.grad = grads[k].detach().to(p.dtype)
    opt.step()
    opt.zero_grad(set_to_none=True)


def adam_state(opt: torch.optim.Adam, params: Mapping[str, torch.Tensor]) -> tuple[int, dict[str, torch.Tensor]]:
    step = 0
    tensors = {}
    for k, p in params.items():
        st = opt.state.get(p)
        if not st:
            tensors[f"exp_avg/{k}"] = torch.zeros_like(p)
            tensors[f"exp_avg_sq/{k}"] = torch.zeros_like(p)
            continue
        step = int(st["step"])
        tensors[f"exp_avg/{k}"] = st["exp_avg"]
        tensors[f"exp_avg_sq/{k}"] = st["exp_avg_sq"]
    return step, tensors


def load_adam_state(opt: torch.optim.Adam, params: Mapping[str, torch.Tensor], step: int, tensors):
    if step == 0:
        return
    for k, p in params.items():
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": tensors[f"exp_avg/{k}"].clone().to(p.dtype),
            "exp_avg_sq": tensors[f"exp_avg_sq/{k}"].clone().to(p.dtype),
        }


def write_tensors(
    directory,
    tensors: Mapping[str, torch.Tensor],
    manifest_name: str = "manifest.json",
    blob_name: str = "params.bin",
    trainable: Mapping[str, bool] | None = None,
    extra: dict | None = None,
):
    """Write a JSON manifest (name -> shape, dtype, byte offset) and a raw little-endian blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        dt = _NAMES[t.dtype]
        raw = t.numpy().astype(np.dtype(dt).newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"shape": list(t.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)}
        if trainable is not None:
            entries[name]["trainable"] = bool(trainable.get(name, False))
        chunks.append(raw)
        offset += len(raw)
    manifest = {"tensors": entries, "total_bytes": offset}
    if extra:
        manifest.update(extra)
    (d / manifest_name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (d / blob_name).write_bytes(b"".join(chunks))


def read_tensors(directory, manifest_name: str = "manifest.json", blob_name: str = "params.bin"):
    """Inverse of :func:`write_tensors`; returns ``(tensors, manifest)``."""
    d = Path(directory)
    try:
        manifest = json.loads((d / manifest_name).read_text())
        blob = (d / blob_name).read_bytes()
    except FileNotFoundError as exc:
        raise ValueError(f"checkpoint file missing: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_name} is not valid JSON: {exc}") from None
    if len(blob) != manifest.get("total_bytes"):
        raise ValueError(f"{blob_name} has {len(blob)} bytes, manifest says {manifest.get('total_bytes')}")
    out = {}
    for name, e in manifest["tensors"].items():
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + count * dt.itemsize > len(blob):
            raise ValueError(f"{blob_name} truncated at tensor {name}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).astype(e["dtype"])
        out[name] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out, manifest


def glorot_(t: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = t.shape
    a = (6.0 / (fan_in + fan_out)) ** 0.5
    with torch.no_grad():
        t.uniform_(-a, a, generator=gen)
    return t


def normal_(t: torch.Tensor, gen: torch.Generator, std: float = 0.02) -> torch.Tensor:
    with torch.no_grad():
        t.normal_(0.0, std, generator=gen)
    return t
