"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the terminal summary.

The end-to-end criteria (4, 5) train the default toy model and take minutes.
"""

import json
import time
from pathlib import Path

import numpy as np

from minidrive import cli, metrics as M
from minidrive.adapter import AdapterConfig, DIAdapter
from minidrive.encoder import EncoderConfig
from minidrive.metrics import EvalPair
from minidrive.moe import FEMoE, MoEConfig
from minidrive.scenes import generate_split, read_dataset, write_dataset
from minidrive.tensor import Tensor

from test_metrics import oracle_bleu, random_corpus

# tolerances and budgets
GRADCHECK_TOL = 1e-4
GRADCHECK_SECONDS = 120
GATE_SUM_TOL = 1e-6
ONE_HOT_TOL = 1e-6
DYNAMISM_NORM = 1e-9
OVERFIT_EM = 0.95
OVERFIT_STEPS = 2000
OVERFIT_SECONDS = 600
HELDOUT_EM = 0.70
HELDOUT_BLEU = 0.60
HELDOUT_STEPS = 6000
HELDOUT_SECONDS = 25 * 60
METEOR_TOL = 1e-6
ROUGE_TOL = 1e-9
BLEU_ORACLE_TOL = 1e-9


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_config(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc))
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_1_gradient_certification(tmp_path, verdict):
    started = time.perf_counter()
    code = run("gradcheck", "--trials", 5, "--out", tmp_path / "gc.json")
    elapsed = time.perf_counter() - started
    payload = json.loads((tmp_path / "gc.json").read_text())
    errs = {k: v for k, v in payload["max_rel_err"].items() if k != "pipeline.kinks"}
    worst = max(errs, key=errs.get)
    ok = (code == 0 and errs[worst] <= GRADCHECK_TOL and "pipeline" in errs
          and payload["trials"] >= 5 and elapsed <= GRADCHECK_SECONDS)
    verdict("1 gradient certification", ok,
            f"{len(errs)} checks, worst {worst}={errs[worst]:.2e} (<= {GRADCHECK_TOL:g}), "
            f"kinks {payload['max_rel_err']['pipeline.kinks']:.1%}, {elapsed:.0f}s (<= {GRADCHECK_SECONDS}s)")
    assert ok


def test_criterion_2_fe_moe_algebra(verdict):
    rng = np.random.default_rng(2)
    worst_sum = worst_sel = 0.0
    shapes_ok = True
    grid = [dict(o) for axis in cli.ABLATIONS.values() for _, o in axis]
    for overrides in grid:
        cfg = MoEConfig(**overrides)
        c, s = EncoderConfig().out_channels, EncoderConfig().out_size
        moe = FEMoE(cfg, c, s)
        moe.gate.linear.weight.data[:] = rng.standard_normal(moe.gate.linear.weight.shape)
        f1 = Tensor(rng.standard_normal((5, c, s, s)).astype(np.float32) * 3)
        w = moe.gate_weights(f1).data.astype(np.float64)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=-1) - 1).max()))
        for i in range(cfg.num_experts):
            onehot = np.zeros(cfg.num_experts, dtype=np.float32)
            onehot[i] = 1
            view = Tensor(f1.data[0])
            mixed = moe.combine(view, Tensor(onehot)).data
            alone = moe.expert_forward(view, i).data
            worst_sel = max(worst_sel, float(np.abs(mixed - alone).max()))
        out = moe.expert_forward(f1, 0).shape
        shapes_ok &= out[1] == cfg.expert_out_channels < c and out[2] == out[3] == 2 * s
    ok = worst_sum <= GATE_SUM_TOL and worst_sel <= ONE_HOT_TOL and shapes_ok
    verdict("2 FE-MoE algebra", ok,
            f"{len(grid)} grid configs, |sum w - 1| max {worst_sum:.1e}, one-hot gap {worst_sel:.1e}, "
            f"shape law {'holds' if shapes_ok else 'violated'}")
    assert ok


def test_criterion_3_adapter_degeneracies(verdict):
    dim = 32
    rng = np.random.default_rng(3)
    live = DIAdapter(AdapterConfig(heads=4, zero_init_output=False, seed=3), dim)
    v = Tensor(rng.standard_normal((6, dim)).astype(np.float32))
    t1 = Tensor(rng.standard_normal((1, dim)).astype(np.float32))
    attended = live.attend(v, t1).data
    single_key = bool(np.array_equal(attended, np.broadcast_to(live.w_v(t1).data, attended.shape)))

    zero = DIAdapter(AdapterConfig(), dim)
    identity = zero(v, Tensor(rng.standard_normal((4, dim)).astype(np.float32))).data.tobytes() == v.data.tobytes()

    hits = 0
    for trial in range(100):
        a = DIAdapter(AdapterConfig(heads=4, zero_init_output=False, seed=trial), dim)
        r = np.random.default_rng([3, trial])
        vv = Tensor(r.standard_normal((8, dim)).astype(np.float32))
        ta = Tensor(r.standard_normal((5, dim)).astype(np.float32))
        tb = Tensor(r.standard_normal((5, dim)).astype(np.float32))
        hits += np.linalg.norm(a(vv, ta).data - a(vv, tb).data) > DYNAMISM_NORM
    ok = single_key and identity and hits == 100
    verdict("3 DI-Adapter degeneracies", ok,
            f"single-key exact={single_key}, zero W_o bitwise identity={identity}, dynamism {hits}/100")
    assert ok


def test_criterion_4_overfit(tmp_path, verdict):
    assert run("generate", "--seed", 1, "--train", 32, "--test", 0, "--out", tmp_path / "data") == 0
    cfg = write_config(tmp_path / "cfg.json", {"train": {"steps": OVERFIT_STEPS, "log_every": 0},
                                                "data": {"dir": str(tmp_path / "data"), "split": "train"}})
    started = time.perf_counter()
    code = run("--config", cfg, "train", "--out", tmp_path / "run")
    elapsed = time.perf_counter() - started
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    em = report["metrics"]["exact_match"]
    ok = code == 0 and em >= OVERFIT_EM and elapsed <= OVERFIT_SECONDS
    verdict("4 end-to-end overfit", ok,
            f"32 samples, {OVERFIT_STEPS} steps: exact match {em:.3f} (>= {OVERFIT_EM}), "
            f"{elapsed:.0f}s (<= {OVERFIT_SECONDS}s)")
    assert ok


def test_criterion_5_generalization(tmp_path, verdict):
    assert run("generate", "--seed", 1, "--train", 512, "--test", 128, "--out", tmp_path / "data") == 0
    cfg = write_config(tmp_path / "cfg.json", {"train": {"steps": HELDOUT_STEPS, "log_every": 0},
                                                "data": {"dir": str(tmp_path / "data")}})
    started = time.perf_counter()
    code = run("--config", cfg, "train", "--out", tmp_path / "run")
    elapsed = time.perf_counter() - started
    rep = json.loads((tmp_path / "run" / "report.json").read_text())["metrics"]
    em, bleu = rep["exact_match"], rep["overall"]["bleu4"]
    ok = code == 0 and em >= HELDOUT_EM and bleu >= HELDOUT_BLEU and elapsed <= HELDOUT_SECONDS
    verdict("5 generalization", ok,
            f"512/128, {HELDOUT_STEPS} steps: held-out exact match {em:.3f} (>= {HELDOUT_EM}), "
            f"BLEU-4 {bleu:.3f} (>= {HELDOUT_BLEU}), {elapsed:.0f}s (<= {HELDOUT_SECONDS}s)")
    assert ok


def test_criterion_6_metric_oracles(verdict):
    def pair(p, r):
        return EvalPair(p.split(), [r.split()])

    checks = {}
    s = "the car is stopped now"
    checks["bleu identical"] = M.bleu4([pair(s, s)]) == 1.0
    checks["rouge identical"] = M.rouge_l([pair(s, s)]) == 1.0
    checks["meteor 1-0.5/L^3"] = all(
        abs(M.meteor([pair(t, t)]) - (1 - 0.5 / n ** 3)) <= METEOR_TOL
        for n in range(1, 9) for t in [" ".join(f"w{i}" for i in range(n))])
    distinct = [pair("the car is stopped now", "the car is stopped now"),
                pair("a truck moves to the left", "a truck moves to the left"),
                pair("one pedestrian will stay still", "one pedestrian will stay still")]
    checks["cider distinct corpus"] = abs(M.cider(distinct) - 10.0) <= 1e-9
    checks["rouge swap 0.75"] = abs(M.rouge_l([pair("a b c d", "a c b d")]) - 0.75) <= ROUGE_TOL
    gaps = [abs(M.bleu4(c) - oracle_bleu(c)) for c in map(random_corpus, range(20))]
    checks["bleu oracle"] = max(gaps) <= BLEU_ORACLE_TOL
    failed = [k for k, v in checks.items() if not v]
    verdict("6 metric oracles", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} checks, corpus BLEU oracle gap {max(gaps):.1e}"
            + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_7_protocol_fidelity(tmp_path, verdict):
    assert run("generate", "--seed", 7, "--train", 16, "--test", 8, "--out", tmp_path / "data") == 0
    cfg = write_config(tmp_path / "cfg.json", {"train": {"steps": 5, "batch": 4, "log_every": 0},
                                                "data": {"dir": str(tmp_path / "data")}})
    assert run("--config", cfg, "train", "--out", tmp_path / "run") == 0
    unchanged = json.loads((tmp_path / "run" / "report.json").read_text())["encoder_unchanged"]
    code = run("--config", cfg, "ablate", "--axis", "all", "--out", tmp_path / "ablate")
    rows = json.loads((tmp_path / "ablate" / "ablation.json").read_text())["rows"]
    tokens = {r["name"]: r["tokens_per_image"] for r in rows}
    want = {"experts=2": 16, "experts=4": 16, "experts=6": 16, "tokens=8": 8, "tokens=16": 16, "tokens=32": 32}
    table = (tmp_path / "ablate" / "ablation.txt").read_text().splitlines()
    ok = code == 0 and unchanged and tokens == want and len(table) == 2 + len(want)
    verdict("7 protocol fidelity", ok,
            f"encoder bit-identical={unchanged}, tokens/img {sorted(set(tokens.values()))}, "
            f"{len(rows)}/6 ablation configs, table rows {len(table) - 2}")
    assert ok


def test_criterion_8_determinism_and_io(tmp_path, verdict):
    for name in ("a", "b"):
        assert run("generate", "--seed", 8, "--train", 10, "--test", 5, "--out", tmp_path / name / "data") == 0
        cfg = write_config(tmp_path / name / "cfg.json",
                           {"train": {"steps": 6, "batch": 4, "log_every": 0},
                            "data": {"dir": str(tmp_path / "a" / "data")}})
        assert run("--config", cfg, "train", "--out", tmp_path / name / "run") == 0
        assert run("eval", "--checkpoint", tmp_path / name / "run" / "checkpoint",
                   "--out", tmp_path / name / "eval") == 0
    same = {part: tree_bytes(tmp_path / "a" / part) == tree_bytes(tmp_path / "b" / part)
            for part in ("data", "run", "eval")}

    samples = generate_split(8, "train", 20)
    write_dataset(samples, tmp_path / "rt")
    round_trip = read_dataset(tmp_path / "rt") == samples

    report = json.loads((tmp_path / "a" / "eval" / "report.json").read_text())["metrics"]
    standalone = json.loads(json.dumps(M.report(M.read_predictions(tmp_path / "a" / "eval" / "predictions.jsonl"))))
    reproducible = all(report[k] == standalone[k] for k in standalone)

    ok = all(same.values()) and round_trip and reproducible
    verdict("8 determinism and IO", ok,
            f"byte-identical {same}, round trip bit-exact={round_trip}, "
            f"report reproducible from predictions={reproducible}")
    assert ok
