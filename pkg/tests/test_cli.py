import json
from pathlib import Path

import numpy as np
import pytest

from spi.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from spi.dataio import read_frames, read_photon_file, read_volume

TINY = str(Path(__file__).with_name("tiny.ini"))


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["sim", "-c", TINY, "-o", str(d / "data.phot"), "--detector", str(d / "det.dat"),
                 "--truth", str(d / "truth.vol"), "--density", str(d / "rho.vol"), "--seed", "3"]) == EXIT_OK
    return d


def test_sim_outputs(simulated):
    pf = read_photon_file(simulated / "data.phot")
    assert len(pf.frames) == 60 and pf.metadata["kind"] == "simulated"
    q = np.loadtxt(simulated / "data.quat")
    assert q.shape == (60, 5)
    assert read_volume(simulated / "truth.vol").edge_length == 17


def test_dilute_split_subset(simulated):
    d = simulated
    assert main(["dilute", str(d / "data.phot"), "-o", str(d / "thin.phot"), "--fraction", "1/4",
                 "--seed", "1"]) == EXIT_OK
    full = sum(f.total_photons for f in read_frames(d / "data.phot"))
    thin = sum(f.total_photons for f in read_frames(d / "thin.phot"))
    assert thin == pytest.approx(full / 4, rel=0.1)
    assert main(["split", str(d / "data.phot"), "-o", str(d / "half")]) == EXIT_OK
    assert len(read_frames(d / "half_odd.phot")) == 30
    assert main(["subset", str(d / "data.phot"), "-n", "10", "-o", str(d / "sub.phot")]) == EXIT_OK
    assert len(read_frames(d / "sub.phot")) == 10


def test_emc_phase_metrics(simulated, capsys):
    d = simulated
    assert main(["emc", "-c", TINY, "--photons", str(d / "data.phot"), "--detector", str(d / "det.dat"),
                 "--iterations", "3", "-o", str(d / "model.vol"), "--log", str(d / "EMC.log")]) == EXIT_OK
    assert read_volume(d / "model.vol").edge_length == 17
    assert len((d / "EMC.log").read_text().splitlines()) == 1 + 3
    assert (d / "model.scales").exists()
    assert main(["phase", "-c", TINY, "-i", str(d / "truth.vol"), "-o", str(d / "avg.vol"),
                 "--repeats", "2", "--stack", str(d / "stack")]) == EXIT_OK
    assert len(list((d / "stack").iterdir())) == 2
    assert (d / "avg.background").exists()
    capsys.readouterr()
    assert main(["metrics", "cc", str(d / "truth.vol"), str(d / "model.vol"), "--align"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "CC1/2=0.5 first crossing" in out
    assert main(["metrics", "prtf", *[str(p) for p in sorted((d / "stack").iterdir())],
                 "-o", str(d / "prtf.txt")]) == EXIT_OK
    assert "PRTF 1/e" in (d / "prtf.txt").read_text()
    assert main(["metrics", "fsc", str(d / "rho.vol"), str(d / "avg.vol"), "-o", str(d / "fsc.txt")]) == EXIT_OK
    assert main(["metrics", "powder", str(d / "data.phot"), "--detector", str(d / "det.dat"),
                 "-o", str(d / "powder.txt")]) == EXIT_OK
    assert np.loadtxt(d / "powder.txt").shape == (13, 13)


def test_pipeline_command(tmp_path):
    out = tmp_path / "report.json"
    assert main(["pipeline", "-c", TINY, "-o", str(out), "--workers", "2"]) == EXIT_OK
    assert json.loads(out.read_text())["failures"] == 0


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[emc]\nnum_div = 0\n")
    assert main(["pipeline", "-c", str(bad)]) == EXIT_CONFIG
    assert main(["pipeline", "-c", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    (tmp_path / "junk.phot").write_bytes(b"junk")
    assert main(["dilute", str(tmp_path / "junk.phot"), "-o", str(tmp_path / "x"), "--fraction", "1/2"]) == EXIT_CONFIG
    assert main(["emc", "-c", TINY, "-o", str(tmp_path / "m.vol")]) == EXIT_CONFIG
    fail = tmp_path / "fail.ini"
    fail.write_text(Path(TINY).read_text().replace("fractions = 1 1/4", "fractions = 0")
                    .replace("frame_counts = 40", "frame_counts =").replace("replicates = 2", "replicates = 1"))
    assert main(["pipeline", "-c", str(fail), "-o", str(tmp_path / "r.json")]) == EXIT_STAGE
    with pytest.raises(SystemExit):
        main(["nonsense"])
