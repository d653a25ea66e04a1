"""Reference adapter: serves the analytic benchmarks over the line protocol.

Run as ``python -m mfals.reference_adapter four_branch`` (or ``rastrigin``,
``borehole``, ``echo``). Exists so the subprocess plumbing can be exercised
end to end without a real solver; ``echo`` returns the sum of its inputs.
Pass ``--fail-after N`` to make the process exit nonzero after N responses
(crash-path testing).
"""

from __future__ import annotations

import argparse
import json
import sys

from .models import EvaluationError, borehole, four_branch, rastrigin_limit

_BOREHOLE_ORDER = ("rw", "r", "Tu", "Hu", "Tl", "Hl", "L", "Kw")


def _respond(target):
    if target == "four_branch":
        inputs = ["x1", "x2"]
        fn = lambda p: four_branch([p["x1"], p["x2"]])
    elif target == "rastrigin":
        inputs = ["x1", "x2"]
        fn = lambda p: rastrigin_limit([p["x1"], p["x2"]])
    elif target == "borehole":
        inputs = list(_BOREHOLE_ORDER)
        fn = lambda p: borehole(*(p[k] for k in _BOREHOLE_ORDER))
    elif target == "echo":
        inputs = []
        fn = lambda p: sum(p.values())
    else:
        raise SystemExit(f"unknown target {target!r}")
    return inputs, fn


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("target", choices=["four_branch", "rastrigin", "borehole", "echo"])
    parser.add_argument("--fail-after", type=int, default=0, metavar="N",
                        help="exit nonzero after N responses (for crash tests)")
    args = parser.parse_args(argv)

    inputs, fn = _respond(args.target)
    sys.stdout.write(json.dumps({"ready": True, "inputs": inputs}) + "\n")
    sys.stdout.flush()

    served = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        req_id = req["id"]
        try:
            value = float(fn(req["params"]))
            reply = {"id": req_id, "value": value}
        except (EvaluationError, KeyError, ValueError) as exc:
            reply = {"id": req_id, "error": str(exc)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
        served += 1
        if args.fail_after and served >= args.fail_after:
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
