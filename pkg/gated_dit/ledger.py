#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT Run Ledger
Records the config snapshot and outcome of every run as run.json.
"""
import json
import logging
import os
from dataclasses import asdict, is_dataclass
from datetime import datetime
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)

LEDGER_FILE = "run.json"
LEDGER_VERSION = "1.0"


class NumpyEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return None if not np.isfinite(obj) else float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, Enum):
            return obj.value
        elif is_dataclass(obj):
            return asdict(obj)
        return super(NumpyEncoder, self).default(obj)


def _finite_or_none(value):
    """NaN/Inf floats become null; json would otherwise write bare NaN"""
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    return value


class RunLedger:
    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.path = os.path.join(run_dir, LEDGER_FILE)

    def write(self, command: str, config: Dict[str, Any], summary: Optional[Dict[str, Any]] = None,
              extra: Optional[Dict[str, Any]] = None) -> str:
        """
        Write the run packet. config is the flat key/value snapshot that
        load_run_config accepts back.
        """
        packet = {
            "version": LEDGER_VERSION,
            "timestamp": datetime.now().isoformat(),
            "command": command,
            "seed": config.get("seed"),
            "mode": config.get("mode"),
            "config": config,
            "summary": summary or {},
        }
        if extra:
            packet.update(extra)

        os.makedirs(self.run_dir, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(_finite_or_none(packet), f, ensure_ascii=False, indent=2, cls=NumpyEncoder)
        return self.path

    def read(self) -> Dict[str, Any]:
        with open(self.path, "r", encoding="utf-8") as f:
            return json.load(f)

    @classmethod
    def beside(cls, checkpoint_path: str) -> "RunLedger":
        """Ledger of the run directory that holds a checkpoint"""
        return cls(os.path.dirname(os.path.abspath(checkpoint_path)))
