"""The ten acceptance criteria at their stated tolerances.

``verify-all`` runs once for criteria 1-9 (each test reads its JSON report),
then a second time for criterion 10, which byte-compares every CSV and JSON file.
"""

import json

import pytest

from glcontrol import cli
from glcontrol.acceptance import CRITERIA

from .conftest import ACCEPTANCE_LINES


def _runtimes(out):
    rt = {}
    for line in (out / "acceptance_runtimes.txt").read_text().splitlines():
        name, sec, _, limit = line.split()
        rt[int(name.split("_")[1])] = (float(sec), float(limit))
    return rt


@pytest.fixture(scope="session")
def verify_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify_a")
    code = cli.run("verify-all", None, [], out)
    return code, out


def _report(number, passed, detail):
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(verify_run, number):
    code, out = verify_run
    assert code == 0
    rep = json.loads((out / f"criterion_{number:02d}.json").read_text())
    sec, limit = _runtimes(out)[number]
    failed = [k for k, ok in rep["checks"].items() if not ok]
    in_time = sec <= limit
    ok = rep["passed"] and in_time
    detail = f"{rep['name']}: {sec:.1f}s of {limit:g}s"
    if failed:
        detail += f"; failed checks: {', '.join(failed)}"
    if not in_time:
        detail += "; over the runtime budget"
    _report(number, ok, detail)
    assert rep["passed"], f"failed checks {failed}: {rep['metrics']}"
    assert in_time


def test_criterion_10_reproducible(verify_run, tmp_path_factory):
    _, out_a = verify_run
    out_b = tmp_path_factory.mktemp("verify_b")
    assert cli.run("verify-all", None, [], out_b) == 0
    files = sorted(p.name for p in out_a.iterdir() if p.suffix in (".csv", ".json"))
    assert any(f.endswith(".csv") for f in files)
    diff = [f for f in files if (out_a / f).read_bytes() != (out_b / f).read_bytes()]
    _report(10, not diff, f"reproducibility: {len(files)} CSV/JSON files compared, {len(diff)} differ")
    assert not diff
