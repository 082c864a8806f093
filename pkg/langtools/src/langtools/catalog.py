"""Instruction catalog: per-task directive texts with train/validation split.

The built-in catalog carries benchmark-style phrasings for the six tabletop
tasks; a custom catalog can be loaded from JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

TASK_NAMES = (
    "open_drawer",
    "close_drawer",
    "move_slider_left",
    "move_slider_right",
    "turn_on_lightbulb",
    "turn_on_led",
)

_DEFAULT = {
    "open_drawer": {
        "train": [
            "open the drawer",
            "pull the handle to open the drawer",
            "grasp the handle and open the drawer",
            "pull the drawer",
            "open the cabinet drawer",
            "slide the drawer open",
            "pull open the drawer",
            "grasp the drawer handle and pull it open",
        ],
        "validation": "pull the handle of the drawer to open it",
    },
    "close_drawer": {
        "train": [
            "close the drawer",
            "push the handle to close the drawer",
            "grasp the handle and close the drawer",
            "push the drawer",
            "close the cabinet drawer",
            "slide the drawer closed",
            "push the drawer shut",
            "grasp the drawer handle and push it closed",
        ],
        "validation": "push the handle of the drawer to close it",
    },
    "move_slider_left": {
        "train": [
            "move the slider to the left",
            "push the sliding door to the left",
            "slide the door to the left",
            "grasp the slider and move it to the left",
            "move the sliding door towards the left",
            "push the slider left",
            "move the door all the way to the left",
            "shift the sliding panel to the left side",
        ],
        "validation": "grasp the sliding door and move it to the left end",
    },
    "move_slider_right": {
        "train": [
            "move the slider to the right",
            "push the sliding door to the right",
            "slide the door to the right",
            "grasp the slider and move it to the right",
            "move the sliding door towards the right",
            "push the slider right",
            "move the door all the way to the right",
            "shift the sliding panel to the right side",
        ],
        "validation": "grasp the sliding door and move it to the right end",
    },
    "turn_on_lightbulb": {
        "train": [
            "turn on the light bulb",
            "flip the switch upwards to turn on the light bulb",
            "move the light switch to turn on the light bulb",
            "toggle the switch to turn on the light bulb",
            "switch on the light bulb",
            "use the switch to turn on the light bulb",
            "flick the switch so the bulb lights up",
            "turn the yellow light on with the switch",
        ],
        "validation": "push the switch upward so the light bulb turns on",
    },
    "turn_on_led": {
        "train": [
            "turn on the led",
            "press the button to turn on the led light",
            "push the button to switch on the led",
            "toggle the button so the led turns on",
            "switch on the led light",
            "use the button to turn on the led",
            "press the button so the green light turns on",
            "turn the green led on with the button",
        ],
        "validation": "press the button so the led lights up",
    },
}


class CatalogError(ValueError):
    pass


@dataclass
class InstructionCatalog:
    tasks: dict  # task -> {"train": [str], "validation": str}

    def __post_init__(self):
        for task, entry in self.tasks.items():
            if task not in TASK_NAMES:
                raise CatalogError(f"unknown task {task!r}")
            if len(entry.get("train", [])) < 2:
                raise CatalogError(f"{task}: need at least 2 training instructions")
            val = entry.get("validation")
            if not isinstance(val, str) or not val:
                raise CatalogError(f"{task}: need exactly one validation instruction")
            if val in entry["train"]:
                raise CatalogError(f"{task}: validation text duplicates a training text")

    def entries(self):
        """Yield (task, text, split) in a stable order."""
        for task in TASK_NAMES:
            if task not in self.tasks:
                continue
            for text in self.tasks[task]["train"]:
                yield task, text, "train"
            yield task, self.tasks[task]["validation"], "validation"

    @classmethod
    def default(cls) -> "InstructionCatalog":
        return cls(json.loads(json.dumps(_DEFAULT)))

    @classmethod
    def from_json(cls, path) -> "InstructionCatalog":
        return cls(json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.tasks, indent=1, sort_keys=True))
