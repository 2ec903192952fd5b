"""
Result Display

This module prints experiment plans, run summaries and errors to the terminal.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

from colorama import Fore, Style, init
from tabulate import tabulate

logger = logging.getLogger(__name__)

init(autoreset=True)


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ', '.join(_format(v) for v in value)
    return str(value)


def display_plan(rows: Sequence[Tuple[str, Any]], source: Optional[str] = None) -> None:
    """
    Display a resolved experiment plan.

    Args:
        rows: (label, value) pairs from the plan
        source: Path of the config file the plan came from
    """
    print("\n" + "=" * 60)
    print(f"{Style.BRIGHT}EXPERIMENT PLAN{Style.RESET_ALL}" + (f"  ({source})" if source else ""))
    print("=" * 60)
    print(tabulate([(label, _format(value)) for label, value in rows], tablefmt='simple'))
    print()


def display_summary(selector: str, passed: bool, summary: Dict[str, Any], run_dir: str,
                    notes: List[str]) -> None:
    """
    Display the outcome of a run.

    Args:
        selector: Experiment that ran
        passed: Whether the experiment's own acceptance check passed
        summary: Key figures reported by the experiment
        run_dir: Directory holding outputs and manifest
        notes: Warnings recorded for the manifest
    """
    colour = Fore.GREEN if passed else Fore.RED
    status = "PASSED" if passed else "FAILED"
    print("\n" + "=" * 60)
    print(f"{Style.BRIGHT}{selector.upper()}{Style.RESET_ALL}  {colour}{status}")
    print("=" * 60)
    if summary:
        print(tabulate([(key, _format(value)) for key, value in summary.items()],
                       headers=['quantity', 'value'], tablefmt='simple'))
    if notes:
        print(f"\n{Fore.YELLOW}Warnings:")
        for note in notes:
            print(f"{Fore.YELLOW}  - {note}")
    print(f"\nOutputs and manifest saved to: {run_dir}\n")


def display_error(message: str) -> None:
    print(f"{Fore.RED}Error: {message}")
