"""Acceptance gate: one test per primary criterion, each printing a
PASS/FAIL line with the measured quantity next to its pinned tolerance.

The full-scale reference scores for the 315-microsecond Ab42 corpus
(VAMP-2 and VAMP-E near 3.99) are NOT reproducible at desk scale; the
synthetic benchmark with its exact transition-matrix oracle substitutes
for them, as printed by criterion 1.
"""
import itertools
import json
import struct
import threading
import time
from pathlib import Path

import numpy as np
import pytest
import requests

from pis import autodiff as ad
from pis.autodiff import Tensor, parameter
from pis.encoder import EncoderParams, encode_batch, residue_type_indices
from pis.graphs import RbfConfig, frame_graph
from pis.kinetics import (
    CovarianceSet,
    build_constrained_K,
    ck_test,
    covariances,
    vamp2_score,
    vamp_e_maximizer,
    vamp_e_score,
)
from pis.physchem import SasaParams, radius_of_gyration, rmsf, sasa
from pis.synthetic import default_spec, generate, oracle_count_K
from pis.trajectory import (
    PdbParseError,
    Trajectory,
    parse_topology,
    read_frames,
    write_frames,
)
from pis.training import (
    TrainConfig,
    encode_frames,
    featurize,
    split_trajectories,
    stage1_pretrain,
    _pairs_for,
)
from _gradcheck import directional_check, finite_difference_check

ORACLE_LAG1 = 3.7648
TARGET = 0.95 * ORACLE_LAG1
WALL_LIMIT_S = 15 * 60


def report(criterion: str, passed: bool, detail: str):
    print(f"\n[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@pytest.fixture(scope="module")
def benchmark_run():
    """Default synthetic benchmark (4 states, 20k frames, seed-fixed),
    featurized and trained through both stages; the stage-1 wall clock is
    recorded separately for criterion 1."""
    from pis.training import stage2_constrained
    spec = default_spec()
    trajs, labels = [], []
    t_start = time.time()
    for i in range(10):
        traj, lab = generate(spec, 2000, seed=7 + i)
        trajs.append(traj)
        labels.append(lab)
    dataset = featurize(trajs)
    config = TrainConfig(lag=1, batch_size=256, epochs_stage1=3, epochs_stage2=10,
                         warmup_epochs=2, lr_stage2=3e-3, seed=2, d_h=16, n_layers=2)
    stage1 = stage1_pretrain(config, dataset)
    stage1_wall = time.time() - t_start
    trained = stage2_constrained(config, dataset, stage1)
    return {"spec": spec, "labels": labels, "dataset": dataset,
            "config": config, "stage1": stage1, "checkpoint": trained,
            "wall_s": stage1_wall}


class TestCriterion1TrainingSubstitute:
    def test_stage1_reaches_oracle_fraction(self, benchmark_run):
        print("\nNOTE: full-corpus scores (~3.99 on the 315 us Ab42 dataset) need "
              "~1.26M frames and are out of scope at desk scale; the synthetic "
              f"benchmark oracle {ORACLE_LAG1} (lag-1 eigenvalues of the true "
              "transition matrix) substitutes.")
        history = benchmark_run["stage1"].history
        best_val = max(r.val_score for r in history)
        epochs = len(history)
        wall = benchmark_run["wall_s"]
        ok = best_val >= TARGET and epochs <= 30 and wall < WALL_LIMIT_S
        report("criterion-1 training substitute", ok,
               f"stage-1 validation VAMP-2 {best_val:.4f} >= {TARGET:.4f} "
               f"within {epochs} epochs (<=30), wall {wall:.0f}s (<{WALL_LIMIT_S}s)")


class TestCriterion2ScoreIdentity:
    def test_maximizer_identity_on_pd_triples(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            m = int(rng.integers(2, 7))
            b0, bt = rng.normal(size=(m, m)), rng.normal(size=(m, m))
            cov = CovarianceSet(
                Tensor(b0 @ b0.T + 0.1 * np.eye(m)),
                Tensor(rng.normal(size=(m, m)) * 0.3),
                Tensor(bt @ bt.T + 0.1 * np.eye(m)),
                lag=1, eps_rel=10 ** rng.uniform(-8, -2), n_pairs=100)
            r2 = float(vamp2_score(cov).value)
            re = float(vamp_e_score(cov, vamp_e_maximizer(cov)).value)
            worst = max(worst, abs(r2 - re))
        report("criterion-2 score identity", worst <= 1e-10,
               f"max |R_E(A*) - R_2| = {worst:.2e} <= 1e-10 over 100 PD triples")


class TestCriterion3ScoreCeiling:
    def test_ceiling_over_randomized_assignments(self):
        rng = np.random.default_rng(77)
        worst_excess = -np.inf
        for _ in range(10_000):
            m = int(rng.integers(2, 6))
            n = int(rng.integers(m, 40))
            x0 = rng.dirichlet(np.ones(m) * rng.uniform(0.2, 3.0), size=n)
            xt = rng.dirichlet(np.ones(m) * rng.uniform(0.2, 3.0), size=n)
            cov = covariances(x0, xt, eps_rel=10 ** rng.uniform(-9, -3))
            worst_excess = max(worst_excess, float(vamp2_score(cov).value) - m)
        report("criterion-3 score ceiling", worst_excess <= 1e-6,
               f"max (VAMP-2 - m) = {worst_excess:.2e} <= 1e-6 over 10^4 assignments")


class TestCriterion4ConstrainedEstimator:
    def test_fuzzed_constraints(self):
        rng = np.random.default_rng(4096)
        worst = {"rowsum": 0.0, "negativity": 0.0, "balance": 0.0, "stationarity": 0.0}
        for _ in range(1000):
            m = int(rng.integers(2, 7))
            n = int(rng.integers(m + 1, 300))
            chi = rng.dirichlet(np.ones(m) * 0.5, size=n)
            built = build_constrained_K(rng.normal(size=m) * 2.0,
                                        rng.normal(size=(m, m)) * 2.0, chi)
            k, pi = built.k.value, built.pi.value[:, 0]
            worst["rowsum"] = max(worst["rowsum"], np.abs(k.sum(axis=1) - 1.0).max())
            worst["negativity"] = max(worst["negativity"], float(-(k.min())))
            flux = pi[:, None] * k
            worst["balance"] = max(worst["balance"], np.abs(flux - flux.T).max())
            worst["stationarity"] = max(worst["stationarity"], np.abs(pi @ k - pi).max())
        ok = (worst["rowsum"] <= 1e-8 and worst["negativity"] <= 0.0
              and worst["balance"] <= 1e-6 and worst["stationarity"] <= 1e-6)
        report("criterion-4 constrained estimator", ok,
               f"over 10^3 fuzzed inputs: row-sum dev {worst['rowsum']:.2e} (<=1e-8), "
               f"min K >= {-worst['negativity']:.2e}, balance {worst['balance']:.2e} (<=1e-6), "
               f"stationarity {worst['stationarity']:.2e} (<=1e-6)")


class TestCriterion5CkConsistency:
    def test_ck_on_100k_synthetic_frames(self):
        spec = default_spec()
        _, labels = generate(spec, 100_000, seed=42)
        chi = np.zeros((labels.shape[0], 4))
        chi[np.arange(labels.shape[0]), labels] = 1.0
        tau = 5
        results = ck_test([chi], base_lag=tau, max_steps=5)
        worst_dev = max(r.max_abs_deviation for r in results if r.steps >= 2)

        # Counting estimator against matrix powers of the true chain.
        worst_oracle = 0.0
        for n in range(2, 6):
            truth = np.linalg.matrix_power(spec.t_true, n)
            counted = oracle_count_K(labels, lag=n, n_states=4)
            worst_oracle = max(worst_oracle, np.abs(counted - truth).max())
        ok = worst_dev <= 0.05 and worst_oracle <= 0.01
        report("criterion-5 CK consistency", ok,
               f"max |K(tau)^n - K(n tau)| = {worst_dev:.4f} <= 0.05 (n=2..5, tau=5, 100k frames); "
               f"count estimator at lag n vs T_true^n within {worst_oracle:.4f} <= 0.01")


class TestCriterion6GradientSuite:
    def test_operation_gradients(self):
        rng = np.random.default_rng(6)
        checks = 0

        def fd(fn, tensors):
            nonlocal checks
            finite_difference_check(fn, tensors, h=1e-5, rtol=1e-4)
            checks += 1

        a, b = parameter(rng.normal(size=(4, 5))), parameter(rng.normal(size=(4, 5)))
        row, s = parameter(rng.normal(size=(1, 5))), parameter(rng.normal())
        w = rng.normal(size=(4, 5))
        fd(lambda: ad.tensor_sum((a + row) * w), [a, row])
        fd(lambda: ad.tensor_sum((a - b) * w), [a, b])
        fd(lambda: ad.tensor_sum((a * b) * w), [a, b])
        fd(lambda: ad.tensor_sum((a / (ad.sigmoid(b) + 1.0)) * w), [a, b])
        fd(lambda: ad.tensor_sum((a + s) * w), [a, s])
        m1, m2 = parameter(rng.normal(size=(3, 6))), parameter(rng.normal(size=(6, 4)))
        wm = rng.normal(size=(3, 4))
        fd(lambda: ad.tensor_sum(ad.matmul(m1, m2) * wm), [m1, m2])
        pos = parameter(rng.uniform(0.5, 2.0, size=(4, 4)))
        w4 = rng.normal(size=(4, 4))
        fd(lambda: ad.tensor_sum(ad.relu(a + 0.05) * w), [a])
        fd(lambda: ad.tensor_sum(ad.sigmoid(a) * w), [a])
        fd(lambda: ad.tensor_sum(ad.tanh(a) * w), [a])
        fd(lambda: ad.tensor_sum(ad.exp(a) * w), [a])
        fd(lambda: ad.tensor_sum(ad.log(pos) * w4), [pos])
        fd(lambda: ad.tensor_sum(ad.sqrt(pos) * w4), [pos])
        fd(lambda: ad.tensor_sum(ad.softmax(a, axis=1) * w), [a])
        w_cat = rng.normal(size=(4, 10))
        fd(lambda: ad.tensor_sum(ad.concat([a, b], axis=1) * w_cat), [a, b])
        w_mean = rng.normal(size=(1, 5))
        fd(lambda: ad.tensor_sum(ad.tensor_mean(a, axis=0) * w_mean), [a])
        w_t = rng.normal(size=(5, 4))
        fd(lambda: ad.tensor_sum(ad.transpose(a) * w_t), [a])
        w_r = rng.normal(size=(2, 10))
        fd(lambda: ad.tensor_sum(ad.reshape(a, (2, 10)) * w_r), [a])
        idx = np.array([0, 2, 2, 3, 1])
        w_g = rng.normal(size=(5, 5))
        fd(lambda: ad.tensor_sum(ad.gather_rows(a, idx) * w_g), [a])
        seg = np.array([0, 0, 1, 1])
        w_s = rng.normal(size=(2, 5))
        fd(lambda: ad.tensor_sum(ad.segment_sum(a, seg, 2) * w_s), [a])
        base = rng.normal(size=(4, 4))
        spd = parameter(base @ base.T + 4 * np.eye(4))
        fd(lambda: ad.trace(ad.matrix_inverse((spd + ad.transpose(spd)) * 0.5)), [spd])
        report("criterion-6a operation gradients", True,
               f"{checks} operations matched central differences at rel err < 1e-4")

    def test_full_encoder_loss_gradients(self):
        from pis.encoder import EncoderConfig
        rng = np.random.default_rng(60)
        cfg = EncoderConfig(d_h=5, n_layers=2, n_states=3, k_neighbors=2,
                            rbf=RbfConfig(n_centers=4, d_max=8.0))
        params = EncoderParams.initialize(cfg, seed=61)
        from pis.trajectory import Atom, Topology
        atoms, ranges, names = [], [], []
        for r in range(5):
            names.append(["ALA", "GLY", "SER", "VAL", "LEU"][r])
            atoms += [Atom("CA", "C", r, names[r], 12.011, 1.7)] * 2
            ranges.append((2 * r, 2 * r + 2))
        topo = Topology(tuple(atoms), tuple(names), tuple(ranges))
        frames = []
        for _ in range(8):
            coords = rng.normal(size=(10, 3)) * 4.0
            g = frame_graph(coords, topo, k=2, rbf=cfg.rbf)
            frames.append((g.neighbors, g.distances))
        neighbors = np.stack([f[0] for f in frames])
        distances = np.stack([f[1] for f in frames])
        phys = np.abs(rng.normal(size=(8, 2))) + 1.0
        types = residue_type_indices(names)

        def loss():
            out = encode_batch(params, types, neighbors, distances, phys)
            chi0 = ad.gather_rows(out.chi, np.arange(0, 4))
            chit = ad.gather_rows(out.chi, np.arange(4, 8))
            return -vamp2_score(covariances(chi0, chit, eps_rel=1e-2))

        directional_check(loss, params.parameters(), rng, rtol=1e-4)
        report("criterion-6b full encoder loss gradients", True,
               f"all {len(params.parameters())} parameter groups matched "
               "finite differences at rel err < 1e-4")


class TestCriterion7PhysicsSuite:
    def test_physics(self):
        from pis.trajectory import Atom, Topology
        carbon = Topology((Atom("C", "C", 0, "ALA", 12.011, 1.7),), ("ALA",), ((0, 1),))
        total, _ = sasa(np.zeros((1, 3)), carbon, SasaParams(n_sphere_points=960))
        exact = 4 * np.pi * 3.1 ** 2
        sphere_err = abs(total - exact) / exact

        rng = np.random.default_rng(7)
        atoms, ranges = [], []
        for r in range(4):
            atoms += [Atom("CA", "C", r, "ALA", 12.011, 1.7)] * 2
            ranges.append((2 * r, 2 * r + 2))
        topo = Topology(tuple(atoms), ("ALA",) * 4, tuple(ranges))
        coords = rng.normal(size=(8, 3)) * 3.0
        rot = random_rotation(rng)
        moved = coords @ rot.T + np.array([11.0, -4.0, 6.0])
        rg_dev = abs(radius_of_gyration(moved, topo) - radius_of_gyration(coords, topo))
        s0, _ = sasa(coords, topo)
        s1, _ = sasa(moved, topo)
        sasa_rel = abs(s1 - s0) / s0

        base = rng.normal(size=(8, 3)) * 3.0
        frames = [base] + [base @ random_rotation(rng).T + rng.normal(size=3) * 5
                           for _ in range(9)]
        rmsf_max = rmsf(Trajectory(topo, np.stack(frames), dt_ps=1.0)).max()

        ok = sphere_err <= 0.02 and rg_dev <= 1e-9 and sasa_rel <= 1e-6 and rmsf_max < 1e-9
        report("criterion-7 physics suite", ok,
               f"isolated-sphere SASA err {sphere_err:.2e} (<=2%), Rg rigid-motion dev "
               f"{rg_dev:.2e} (<=1e-9), SASA rigid-motion rel {sasa_rel:.2e} (<=1e-6), "
               f"rigid-rotation RMSF {rmsf_max:.2e} A (<1e-9)")


class TestCriterion8StateRecovery:
    def test_heldout_accuracy(self, benchmark_run):
        dataset = benchmark_run["dataset"]
        checkpoint = benchmark_run["checkpoint"]
        config = benchmark_run["config"]
        labels = benchmark_run["labels"]
        _, val_ids = split_trajectories(len(dataset.lengths),
                                        config.validation_fraction, config.seed)
        offsets = dataset.offsets
        frame_idx = np.concatenate([
            np.arange(offsets[t], offsets[t + 1]) for t in val_ids])
        truth = np.concatenate([labels[t] for t in val_ids])
        chi, _, _ = encode_frames(checkpoint.encoder, dataset, frame_idx)
        predicted = chi.argmax(axis=1)
        best = 0.0
        for perm in itertools.permutations(range(4)):
            mapped = np.array(perm)[predicted]
            best = max(best, float((mapped == truth).mean()))
        report("criterion-8 state recovery", best >= 0.95,
               f"held-out accuracy {best:.4f} >= 0.95 "
               f"({frame_idx.shape[0]} frames, best of 24 permutations)")


class TestCriterion9Formats:
    def test_pistrj_and_checkpoint_roundtrips(self, tmp_path):
        spec = default_spec()
        traj, _ = generate(spec, 40, seed=5)
        data = write_frames(traj)
        assert write_frames(read_frames(data, traj.topology)) == data

        rng = np.random.default_rng(9)
        arrays = {"a.b": rng.normal(size=(7, 3)), "scalar": np.array(2.5),
                  "bias": rng.normal(size=(4,))}
        blob = ad.save_arrays(arrays)
        assert ad.save_arrays(ad.load_arrays(blob)) == blob

        fixtures = Path(__file__).parent / "fixtures" / "pdb"
        accepted, rejected = [], []
        for fixture in sorted(fixtures.glob("*.pdb")):
            text = fixture.read_text()
            if fixture.name.startswith("malformed_"):
                with pytest.raises(PdbParseError):
                    parse_topology(text)
                rejected.append(fixture.name)
            else:
                parse_topology(text)
                accepted.append(fixture.name)
        expected_errors = {
            "malformed_empty.pdb": "no ATOM records",
            "malformed_coords.pdb": "malformed coordinate",
            "malformed_short.pdb": "shorter",
            "malformed_element.pdb": "Fe",
        }
        for name, needle in expected_errors.items():
            with pytest.raises(PdbParseError, match=needle):
                parse_topology((fixtures / name).read_text())
        report("criterion-9 formats", len(accepted) >= 5 and len(rejected) == 4,
               f"PISTRJ and checkpoint round-trips bit-exact; PDB corpus: "
               f"{len(accepted)} accepted, {len(rejected)} rejected with specified errors")


class TestCriterion10HttpWithoutFrontend:
    def test_pipeline_and_api_over_http(self, tmp_path):
        from pis.cli import main as cli_main
        from pis.project import ProjectStore
        from pis.service import ApiServer

        root = tmp_path / "proj"
        assert cli_main(["synth", "--project", str(root), "--frames", "160",
                         "--trajectories", "4", "--seed", "3"]) == 0
        assert cli_main(["features", "--project", str(root)]) == 0
        assert cli_main(["train", "--project", str(root), "--lag", "1",
                         "--batch-size", "64", "--epochs1", "1", "--epochs2", "1",
                         "--warmup", "1", "--d-h", "8", "--layers", "1"]) == 0
        assert cli_main(["analyze", "--project", str(root), "--lag", "1",
                         "--steps", "2"]) == 0

        api = ApiServer(("127.0.0.1", 0), ProjectStore(root))
        thread = threading.Thread(target=api.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{api.server_address[1]}"
        try:
            manifest = requests.get(f"{base}/api/manifest").json()
            assert manifest["totals"]["n_frames_total"] == 160
            metrics = requests.get(f"{base}/api/traj/0/metrics",
                                   params={"series": "rg"}).json()
            assert len(metrics) == 40 and all(v > 0 for v in metrics)
            frames = requests.get(f"{base}/api/traj/0/frames",
                                  params={"start": 3, "count": 2})
            assert struct.unpack("<I", frames.content[8:12])[0] == 2
            ck = requests.get(f"{base}/api/cktest", params={"lag": 1, "n": 1}).json()
            assert ck["predicted"] == ck["estimated"]
            status = requests.get(f"{base}/api/train/status").json()
            assert status["stage"] == "idle"
        finally:
            api.shutdown()
        report("criterion-10 primary-only HTTP", True,
               "CLI pipeline plus API integration ran over HTTP with no "
               "frontend component present")
