"""Serve the built-in classifier over the adapter protocol.

    python -m softerase.adapter_server params.json
"""

from __future__ import annotations

import json
import sys

import numpy as np

from .adapter import PROTOCOL_VERSION
from .model import ModelParams, backward_input_grad, forward, load_params


def handle(msg: dict, params: ModelParams) -> dict:
    kind = msg.get("type")
    if kind == "hello":
        if msg.get("version") != PROTOCOL_VERSION:
            return {"type": "error", "message": f"unsupported version {msg.get('version')!r}"}
        return {"type": "ready", "provides": ["probs", "attention", "grads"]}
    if kind == "predict":
        x = np.array(msg["embeddings"], dtype=np.float64)
        trace = forward(x, params)
        grads, _ = backward_input_grad(trace, params, trace.predicted)
        return {
            "type": "result",
            "id": msg["id"],
            "probs": trace.probs.tolist(),
            "attention": trace.attention.mean(axis=0).tolist(),
            "grads": grads.tolist(),
        }
    return {"type": "error", "message": f"unknown message type {kind!r}"}


def serve(params: ModelParams, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        try:
            reply = handle(json.loads(line), params)
        except Exception as exc:  # report and keep serving
            reply = {"type": "error", "message": str(exc)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m softerase.adapter_server PARAMS_FILE", file=sys.stderr)
        return 1
    serve(load_params(argv[0]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
