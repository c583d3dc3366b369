"""Pass/fail registry for the acceptance suite, printed in the pytest summary."""

from __future__ import annotations

import json
import os
from pathlib import Path

RESULTS: dict[int, dict] = {}


def results_path() -> Path:
    return Path(os.environ.get("UARL_RUNS_DIR") or "runs") / "acceptance" / "acceptance_results.json"


def record(cid: int, ok: bool, detail: str) -> bool:
    RESULTS[cid] = {"status": "pass" if ok else "fail", "detail": detail}
    path = results_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    merged = json.loads(path.read_text()) if path.exists() else {}
    merged[str(cid)] = RESULTS[cid]
    path.write_text(json.dumps(dict(sorted(merged.items(), key=lambda kv: int(kv[0]))), indent=2))
    print(f"criterion {cid}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok
