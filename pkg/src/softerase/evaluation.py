"""End-to-end evaluation sweep, report files, and curve emission.

Run directory layout:

* ``manifest.json``     config, seed, model fingerprint, exclusion counts
* ``records.csv``       one row per (instance, FA, metric, ratio)
* ``pairs.csv``         attribution value ``u`` next to its random counterpart ``v``
* ``exclusions.csv``    instances dropped because p_full - p_zero is degenerate
* ``aggregates.csv``    corpus means per (FA, metric, ratio)
* ``diagnosticity.csv`` per-FA and averaged diagnosticity with rank-sum p-values
* ``curves_*.csv``      per-ratio series written by ``emit_curves``
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import shlex
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import AdapterEndpoint, AdapterSession
from .attribution import (
    AttributionScores,
    FA_NAMES,
    compute_fa,
    load_attributions,
    random_fa,
    top_k_rationale,
)
from .config import RunConfig
from .corpus import generate_synthetic, load_corpus
from .errors import ConsistencyError, DataError, ParameterError, SoftEraseError
from .metrics import (
    HARD_COUNTERPART,
    METRICS,
    LikelihoodTriple,
    aopc,
    baseline_gap,
    diagnosticity,
    normalized_comprehensiveness,
    normalized_sufficiency,
    rank_sum_test,
    soft_nc,
    soft_ns,
    win_indicators,
)
from .model import (
    ModelParams,
    TokenSequence,
    accuracy,
    embed,
    load_params,
    predict_probs_batch,
    train_model,
)
from .numerics import rng_for
from .perturbation import SoftPerturbConfig, hard_remove, hard_retain, soft_perturb

# first element of every RNG path, one per purpose
PATH_MASKS, PATH_RANDOM_FA, PATH_COUNTERPART, PATH_TRAIN, PATH_DATA = range(5)
AOPC = "aopc"
AVERAGE = "average"
DEGENERATE_REASON = "degenerate baseline: p_full - p_zero <= 1e-6"


class EvaluationError(SoftEraseError):
    def __init__(self, message: str, cause: SoftEraseError):
        super().__init__(message)
        self.exit_code = cause.exit_code


def ratio_key(r: float) -> str:
    return repr(float(r))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Prepared:
    params: ModelParams
    test: list[TokenSequence]
    info: dict = field(default_factory=dict)


def prepare(cfg: RunConfig) -> Prepared:
    """Load or generate corpora and load or train the model."""
    info: dict = {}
    synthetic = None
    if cfg.test_corpus is None or (cfg.params_path is None and cfg.train_corpus is None):
        synthetic = generate_synthetic(cfg.synthetic_spec(), rng_for(cfg.seed, [PATH_DATA]))
    if cfg.params_path is not None:
        params = load_params(cfg.params_path)
    else:
        if cfg.train_corpus is not None:
            train_set = load_corpus(
                cfg.train_corpus, vocab_size=cfg.vocab_size, num_classes=cfg.num_classes,
                max_len=cfg.max_len,
            )
        else:
            train_set = synthetic["train"]
        result = train_model(
            train_set,
            cfg.train_config(),
            rng_for(cfg.seed, [PATH_TRAIN]),
            vocab_size=cfg.vocab_size,
            num_classes=cfg.num_classes,
            dim=cfg.dim,
            max_len=cfg.max_len,
        )
        params = result.params
        info["train_loss_first"] = result.loss_history[0]
        info["train_loss_last"] = result.loss_history[-1]
        info["train_accuracy"] = accuracy(train_set, params)
    if cfg.test_corpus is not None:
        test = load_corpus(
            cfg.test_corpus, vocab_size=params.vocab_size, num_classes=params.num_classes,
            max_len=params.max_len,
        )
    else:
        test = synthetic["test"]
    if not test:
        raise DataError("test corpus is empty")
    info["test_accuracy"] = accuracy(test, params)
    info["model_fingerprint"] = params.fingerprint
    return Prepared(params, test, info)


@dataclass
class InstanceResult:
    index: int
    instance_id: str
    records: list[tuple] = field(default_factory=list)  # (fa, metric, ratio, samples, value)
    pairs: list[tuple] = field(default_factory=list)  # (fa, metric, ratio, u, v)
    excluded: str | None = None


class _Predictor:
    """Batched class probabilities, in process or through an adapter."""

    def __init__(self, params: ModelParams, session: AdapterSession | None = None):
        self.params = params
        self.session = session

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        if self.session is None:
            return predict_probs_batch(xs, self.params)
        return np.stack([self.session.predict(x).probs for x in xs])


def explanation_values(
    x: np.ndarray,
    scores: AttributionScores,
    cls: int,
    p_full: float,
    p_zero: float,
    predictor,
    cfg: RunConfig,
    mask_rng,
) -> dict[tuple[str, str], float]:
    """All metric values for one explanation of one non-degenerate instance.

    Keys are ``(metric, ratio)`` with ratio a ratio key, ``"aopc"``, or ``""``
    for soft metrics.
    """
    inputs = []
    for r in cfg.ratios:
        rationale = top_k_rationale(scores, r)
        inputs.append(hard_retain(x, rationale))
        inputs.append(hard_remove(x, rationale))
    m = cfg.samples
    inputs.extend(soft_perturb(x, scores.normalized, SoftPerturbConfig("retain", mask_rng, m)))
    inputs.extend(soft_perturb(x, scores.normalized, SoftPerturbConfig("remove", mask_rng, m)))
    probs = predictor(np.stack(inputs))[:, cls]
    out: dict[tuple[str, str], float] = {}
    ns, nc = [], []
    for j, r in enumerate(cfg.ratios):
        ns.append(normalized_sufficiency(LikelihoodTriple(p_full, float(probs[2 * j]), p_zero)))
        nc.append(
            normalized_comprehensiveness(LikelihoodTriple(p_full, float(probs[2 * j + 1]), p_zero))
        )
        out[("NS", ratio_key(r))] = ns[-1]
        out[("NC", ratio_key(r))] = nc[-1]
    out[("NS", AOPC)] = aopc(ns, cfg.ratios)
    out[("NC", AOPC)] = aopc(nc, cfg.ratios)
    base = 2 * len(cfg.ratios)
    out[("SoftNS", "")] = soft_ns(p_full, probs[base : base + m], p_zero, cfg.soft_average)
    out[("SoftNC", "")] = soft_nc(p_full, probs[base + m :], p_zero, cfg.soft_average)
    return out


def evaluate_instance(
    index: int,
    seq: TokenSequence,
    params: ModelParams,
    cfg: RunConfig,
    predictor,
    imported: dict | None = None,
) -> InstanceResult:
    res = InstanceResult(index, seq.id)
    x = embed(seq, params)
    full = predictor(x[None])[0]
    cls = int(np.argmax(full))
    p_full = float(full[cls])
    p_zero = float(predictor(np.zeros_like(x)[None])[0][cls])
    if baseline_gap(p_full, p_zero) is None:
        res.excluded = DEGENERATE_REASON
        return res
    mask_rng = rng_for(cfg.seed, [PATH_MASKS, index])
    for f, fa in enumerate(cfg.fas):
        stage = "attribution"
        try:
            if fa in FA_NAMES:
                u = compute_fa(
                    fa, x, params, cls,
                    rng=rng_for(cfg.seed, [PATH_RANDOM_FA, index]),
                    instance_id=seq.id, ig_steps=cfg.ig_steps, reduce=cfg.token_reduce,
                )
            else:
                u = (imported or {}).get((seq.id, fa))
                if u is None:
                    raise DataError(f"no imported scores for ({seq.id!r}, {fa!r})")
                if len(u) != len(seq):
                    raise DataError(
                        f"imported scores for ({seq.id!r}, {fa!r}) have length {len(u)}, "
                        f"sequence has {len(seq)}"
                    )
            v = random_fa(rng_for(cfg.seed, [PATH_COUNTERPART, index, f]), len(seq), seq.id)
            stage = "metrics"
            uvals = explanation_values(x, u, cls, p_full, p_zero, predictor, cfg, mask_rng)
            vvals = explanation_values(x, v, cls, p_full, p_zero, predictor, cfg, mask_rng)
        except SoftEraseError as exc:
            raise EvaluationError(
                f"instance {seq.id!r} (#{index}), FA {fa!r}, stage {stage}: {exc}", exc
            ) from exc
        for (metric, ratio), value in uvals.items():
            samples = cfg.samples if metric in HARD_COUNTERPART else ""
            res.records.append((fa, metric, ratio, samples, value))
            res.pairs.append((fa, metric, ratio, value, vvals[(metric, ratio)]))
    return res


# worker-process state, set by _init_worker
_WORKER: dict = {}


def _make_session(cfg: RunConfig) -> AdapterSession | None:
    if cfg.adapter_command is None:
        return None
    session = AdapterSession(
        AdapterEndpoint(tuple(shlex.split(cfg.adapter_command)), timeout_ms=cfg.adapter_timeout_ms)
    )
    session.start()
    return session


def _init_worker(params: ModelParams, cfg: RunConfig, imported) -> None:
    _WORKER.update(params=params, cfg=cfg, imported=imported)
    _WORKER["predictor"] = _Predictor(params, _make_session(cfg))


def _run_chunk(chunk: list[tuple[int, TokenSequence]]) -> list[InstanceResult]:
    w = _WORKER
    return [
        evaluate_instance(i, seq, w["params"], w["cfg"], w["predictor"], w["imported"])
        for i, seq in chunk
    ]


def evaluate_corpus(
    params: ModelParams,
    test: list[TokenSequence],
    cfg: RunConfig,
    workers: int = 1,
    imported: dict | None = None,
) -> list[InstanceResult]:
    """Per-instance results in corpus order, independent of ``workers``."""
    indexed = list(enumerate(test))
    if workers <= 1:
        session = _make_session(cfg)
        try:
            predictor = _Predictor(params, session)
            return [evaluate_instance(i, s, params, cfg, predictor, imported) for i, s in indexed]
        finally:
            if session is not None:
                session.close()
    chunk_size = max(1, -(-len(indexed) // (workers * 4)))
    chunks = [indexed[i : i + chunk_size] for i in range(0, len(indexed), chunk_size)]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(
        max_workers=workers, mp_context=ctx, initializer=_init_worker,
        initargs=(params, cfg, imported),
    ) as pool:
        results = [r for part in pool.map(_run_chunk, chunks) for r in part]
    return sorted(results, key=lambda r: r.index)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def diagnosticity_rows(pair_rows, fas, dataset: str, epsilon: float) -> list[tuple]:
    """Diagnosticity per (FA, metric) over AOPC / soft pairs, plus the pooled average
    over all non-random FAs. Each row carries the rank-sum p-value of its win
    indicators against those of the counterpart metric."""
    groups: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
    for fa, metric, ratio, u, v in pair_rows:
        if ratio in (AOPC, ""):
            groups[(fa, metric)].append((u, v))
            if fa != "random":
                groups[(AVERAGE, metric)].append((u, v))
    partner = {**HARD_COUNTERPART, **{h: s for s, h in HARD_COUNTERPART.items()}}
    labels = list(fas) + ([AVERAGE] if any(fa != "random" for fa in fas) else [])
    rows = []
    for fa in labels:
        for metric in METRICS:
            pairs = groups.get((fa, metric))
            if not pairs:
                continue
            report = diagnosticity(pairs, epsilon=epsilon, metric=metric, fa_name=fa, dataset=dataset)
            other = groups.get((fa, partner[metric]))
            p = (
                rank_sum_test(win_indicators(pairs, epsilon), win_indicators(other, epsilon))
                if other
                else None
            )
            rows.append(
                (dataset, fa, metric, report.pairs, report.wins, report.ties, report.value, p)
            )
    return rows


def write_reports(
    run_dir: Path, cfg: RunConfig, prepared: Prepared, results: list[InstanceResult]
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    record_rows, pair_rows, exclusion_rows = [], [], []
    for res in results:
        if res.excluded is not None:
            exclusion_rows.extend((res.instance_id, fa, res.excluded) for fa in cfg.fas)
            continue
        record_rows.extend((res.instance_id, *r) for r in res.records)
        pair_rows.extend((res.instance_id, *p) for p in res.pairs)
    _write_csv(
        run_dir / "records.csv",
        ["instance_id", "fa_name", "metric", "ratio", "samples", "value"],
        record_rows,
    )
    _write_csv(
        run_dir / "pairs.csv", ["instance_id", "fa_name", "metric", "ratio", "u", "v"], pair_rows
    )
    _write_csv(run_dir / "exclusions.csv", ["instance_id", "fa_name", "reason"], exclusion_rows)

    sums: dict[tuple, list[float]] = defaultdict(list)
    for _, fa, metric, ratio, _samples, value in record_rows:
        sums[(fa, metric, ratio)].append(value)
    _write_csv(
        run_dir / "aggregates.csv",
        ["fa_name", "metric", "ratio", "mean", "count"],
        [(fa, m, r, float(np.mean(v)), len(v)) for (fa, m, r), v in sums.items()],
    )
    _write_csv(
        run_dir / "diagnosticity.csv",
        ["dataset", "fa_name", "metric", "pairs", "wins", "ties", "diagnosticity", "rank_sum_p"],
        diagnosticity_rows(
            [p[1:] for p in pair_rows], cfg.fas, cfg.dataset, cfg.epsilon
        ),
    )
    config = cfg.as_dict()
    config.pop("output_dir")
    manifest = {
        "library_version": __version__,
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "config": config,
        "instances": len(results),
        "excluded_instances": sum(r.excluded is not None for r in results),
        "exclusion_reasons": _count(r.excluded for r in results if r.excluded),
        **prepared.info,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _count(items) -> dict[str, int]:
    out: dict[str, int] = defaultdict(int)
    for item in items:
        out[item] += 1
    return dict(sorted(out.items()))


def run_evaluation(cfg: RunConfig, workers: int = 1, run_dir: str | Path | None = None) -> Path:
    """Prepare, evaluate every test instance, write all reports and curves."""
    run_dir = Path(run_dir if run_dir is not None else cfg.output_dir)
    if cfg.adapter_command is not None:
        gradient_fas = set(cfg.fas) & (set(FA_NAMES) - {"random"})
        if gradient_fas:
            raise ParameterError(
                f"with an adapter only imported and random attributions are supported, got {sorted(gradient_fas)}"
            )
    imported = load_attributions(cfg.attributions_path) if cfg.attributions_path else None
    prepared = prepare(cfg)
    results = evaluate_corpus(prepared.params, prepared.test, cfg, workers, imported)
    write_reports(run_dir, cfg, prepared, results)
    emit_curves(run_dir)
    return run_dir


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ConsistencyError(f"run artifact {path} is missing")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_curves(run_dir: str | Path) -> list[Path]:
    """Per-ratio faithfulness means and diagnosticity, with soft metrics as flat rows.

    Soft rows use ratio ``all``: they do not depend on a rationale length.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConsistencyError(f"{manifest_path} is missing; not a completed run")
    manifest = json.loads(manifest_path.read_text())
    dataset = manifest["dataset"]
    epsilon = manifest["config"]["epsilon"]
    fas = manifest["config"]["fas"]
    ratios = [ratio_key(r) for r in manifest["config"]["ratios"]]
    records = _read_csv(run_dir / "records.csv")
    pairs = _read_csv(run_dir / "pairs.csv")

    values: dict[tuple, list[float]] = defaultdict(list)
    for row in records:
        values[(row["fa_name"], row["metric"], row["ratio"])].append(float(row["value"]))
    faith_rows = []
    for fa in fas:
        for r in ratios:
            for metric in ("NS", "NC"):
                v = values.get((fa, metric, r))
                if v:
                    faith_rows.append((r, fa, metric, float(np.mean(v))))
        for metric in ("SoftNS", "SoftNC"):
            v = values.get((fa, metric, ""))
            if v:
                faith_rows.append(("all", fa, metric, float(np.mean(v))))

    grouped: dict[tuple, list[tuple[float, float]]] = defaultdict(list)
    for row in pairs:
        key_ratio = "all" if row["ratio"] == "" else row["ratio"]
        if key_ratio == AOPC:
            continue
        uv = (float(row["u"]), float(row["v"]))
        grouped[(row["fa_name"], row["metric"], key_ratio)].append(uv)
        if row["fa_name"] != "random":
            grouped[(AVERAGE, row["metric"], key_ratio)].append(uv)
    labels = list(fas) + ([AVERAGE] if any(fa != "random" for fa in fas) else [])
    diag_rows = []
    for fa in labels:
        for r in ratios:
            for metric in ("NS", "NC"):
                p = grouped.get((fa, metric, r))
                if p:
                    diag_rows.append((r, fa, metric, diagnosticity(p, epsilon=epsilon).value))
        for metric in ("SoftNS", "SoftNC"):
            p = grouped.get((fa, metric, "all"))
            if p:
                diag_rows.append(("all", fa, metric, diagnosticity(p, epsilon=epsilon).value))

    faith_path = run_dir / f"curves_faithfulness_{dataset}.csv"
    diag_path = run_dir / f"curves_diagnosticity_{dataset}.csv"
    _write_csv(faith_path, ["ratio", "fa_name", "metric", "mean"], faith_rows)
    _write_csv(diag_path, ["ratio", "fa_name", "metric", "diagnosticity"], diag_rows)
    return [faith_path, diag_path]
