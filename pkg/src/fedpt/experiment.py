"""Experiment lifecycle behind the command line: pretrain, run, eval, decode, inspect.

Output layout under the output directory::

    pretrain/small.ckpt, pretrain/large.ckpt, pretrain/pretrain.json
    runs/<mode>-seed<seed>/manifest.json
    runs/<mode>-seed<seed>/metrics.jsonl
    runs/<mode>-seed<seed>/adapters/round_<t>.fpla
    runs/<mode>-seed<seed>/eval/...

Everything except file paths in the manifest is a pure function of the config.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

from . import checkpoint
from .adapter import AdaptedModel, LoraAdapter, deserialize, serialize
from .config import ExperimentConfig
from .data import (Corpus, DevicePartition, Example, general_text, generate_corpus,
                   partition_dirichlet, partition_pathological)
from .decode import greedy_decode
from .data import detokenize, format_prompt, strip_specials, tokenize
from .errors import ConfigurationError, ContractViolation, FormatError, InputError
from .evaluation import EvalReport, evaluate, report_rows
from .federation import init_state, make_devices, run_experiment
from .model import ModelParams
from .pretrain import held_out_loss, pretrain
from .proxy import ProxyEnsemble

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
MANIFEST_VERSION = 1


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    ctx = min(cfg.small.context_len, cfg.large.context_len)
    return generate_corpus(cfg.component_seed("data", "corpus"), cfg.data.sizes,
                           cfg.data.categories, context_len=ctx)


def build_partition(cfg: ExperimentConfig, corpus: Corpus) -> DevicePartition:
    seed = cfg.component_seed("data", "partition")
    n = cfg.federation.num_devices
    if cfg.data.partition == "pathological":
        return partition_pathological(corpus, n, seed)
    return partition_dirichlet(corpus, n, cfg.data.concentration, seed)


def pretrain_texts(cfg: ExperimentConfig) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    cats = cfg.data.categories
    return (general_text(cfg.component_seed("data", "general"), cfg.data.general_size, cats),
            general_text(cfg.component_seed("data", "heldout"), cfg.data.heldout_size, cats))


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    small: ModelParams
    large: ModelParams
    small_loss: float
    large_loss: float
    paths: dict[str, str]


def cmd_pretrain(cfg: ExperimentConfig, out: str | Path) -> PretrainResult:
    """Train both bases from scratch on general text and write their checkpoints."""
    p = cfg.pretrain
    if p.token_budget <= 0:
        raise InputError("pretrain.token_budget must be positive")
    train, held = pretrain_texts(cfg)
    models, losses = {}, {}
    for name, mcfg in (("small", cfg.small), ("large", cfg.large)):
        log.info("pretraining %s base (%d params)", name, mcfg.num_params())
        models[name] = pretrain(mcfg, train, p.token_budget, cfg.component_seed("init", name),
                                batch_size=p.batch_size, lr=p.lr if name == "small" else p.large_lr,
                                warmup=p.warmup, clip=p.clip)
        losses[name] = held_out_loss(models[name], held)
        log.info("%s held-out loss %.4f", name, losses[name])
    d = Path(out) / "pretrain"
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, m in models.items():
        paths[name] = str(d / f"{name}.ckpt")
        checkpoint.save(m, paths[name], cfg.component_seed("init", name),
                        {"held_out_loss": repr(losses[name])})
    (d / "pretrain.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "held_out_loss": losses, "checkpoints": paths}, indent=2))
    if not losses["large"] < losses["small"]:
        raise ContractViolation(
            f"large base held-out loss {losses['large']:.4f} is not below the small base's "
            f"{losses['small']:.4f}; raise pretrain.token_budget")
    return PretrainResult(models["small"], models["large"], losses["small"], losses["large"],
                          paths)


def load_bases(out: str | Path, need_large: bool = True
               ) -> tuple[ModelParams, ModelParams | None]:
    d = Path(out) / "pretrain"
    paths = [d / "small.ckpt"] + ([d / "large.ckpt"] if need_large else [])
    for path in paths:
        if not path.exists():
            raise ConfigurationError(f"missing pretrained checkpoint {path}; run pretrain first")
    small = checkpoint.load(paths[0])
    return small, checkpoint.load(paths[1]) if need_large else None


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    code_version: str
    base_checkpoints: dict[str, str]
    base_sha256: dict[str, str]
    round_checkpoints: dict[int, str]
    metrics_log: str

    def to_dict(self) -> dict:
        return {"manifest_version": MANIFEST_VERSION, "config": self.config, "seeds": self.seeds,
                "code_version": self.code_version, "base_checkpoints": self.base_checkpoints,
                "base_sha256": self.base_sha256,
                "round_checkpoints": {str(k): v for k, v in self.round_checkpoints.items()},
                "metrics_log": self.metrics_log}

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        try:
            if d["manifest_version"] != MANIFEST_VERSION:
                raise FormatError(f"unsupported manifest version {d['manifest_version']}")
            return cls(d["config"], d["seeds"], d["code_version"], d["base_checkpoints"],
                       d["base_sha256"],
                       {int(k): v for k, v in d["round_checkpoints"].items()}, d["metrics_log"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed run manifest: {exc}") from None

    @property
    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)


def load_manifest(path: str | Path) -> RunManifest:
    try:
        return RunManifest.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ConfigurationError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not JSON: {exc}") from None


def run_dir(cfg: ExperimentConfig, out: str | Path) -> Path:
    return Path(out) / "runs" / f"{cfg.federation.mode}-seed{cfg.seed}"


def _log_line(record: dict) -> str:
    return json.dumps({"schema": METRICS_SCHEMA, **record}, sort_keys=True) + "\n"


def cmd_run(cfg: ExperimentConfig, out: str | Path) -> RunManifest:
    """One federated experiment in the configured mode, logged round by round."""
    fed = cfg.federation
    uses_large = fed.mode != "fedavg-small"
    small, large = load_bases(out, need_large=uses_large)
    if small.config != cfg.small or (large is not None and large.config != cfg.large):
        raise ConfigurationError("pretrained checkpoints do not match the configured models")
    rdir = run_dir(cfg, out)
    (rdir / "adapters").mkdir(parents=True, exist_ok=True)
    base_paths = {"small": str(Path(out) / "pretrain" / "small.ckpt")}
    if uses_large:
        base_paths["large"] = str(Path(out) / "pretrain" / "large.ckpt")
    metrics = rdir / "metrics.jsonl"
    rounds: dict[int, str] = {}
    with open(metrics, "w", encoding="utf-8") as logf:
        logf.write(_log_line({"type": "start", "mode": fed.mode, "seed": cfg.seed,
                              "rounds": fed.rounds}))
        if fed.mode != "base":
            corpus = build_corpus(cfg)
            devices = make_devices(build_partition(cfg, corpus), corpus)
            public = [corpus.encoded(int(i)) for i in corpus.indices("public")]
            state = init_state(fed, small, large, devices, public)
            ckpt_rounds = set(fed.checkpoint_rounds) | {fed.rounds}

            def on_round(rec, adapter: LoraAdapter) -> None:
                logf.write(_log_line({"type": "round", **rec.to_dict()}))
                logf.flush()
                t = rec.round + 1
                if t in ckpt_rounds:
                    path = rdir / "adapters" / f"round_{t:03d}.fpla"
                    path.write_bytes(serialize(adapter))
                    rounds[t] = str(path)
                log.info("round %d/%d done", t, fed.rounds)

            res = run_experiment(state, on_round)
            logf.write(_log_line({"type": "end", "adapter_checksum": res.adapter.checksum(),
                                  "bytes_total": sum(r.bytes_communicated
                                                     for r in res.records)}))
        else:
            logf.write(_log_line({"type": "end", "adapter_checksum": None, "bytes_total": 0}))
    manifest = RunManifest(
        config=cfg.to_dict(),
        seeds={"root": cfg.seed, "eval": list(cfg.eval.seeds)},
        code_version=code_version(),
        base_checkpoints=base_paths,
        base_sha256={k: _sha256(Path(v)) for k, v in base_paths.items()},
        round_checkpoints=rounds, metrics_log=str(metrics))
    (rdir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


# ---------------------------------------------------------------------------
# eval / decode
# ---------------------------------------------------------------------------


def _load_run(manifest: RunManifest, round_: int | None):
    """(small, large or None, adapter or None, resolved round) for a manifest."""
    for name, path in manifest.base_checkpoints.items():
        if not Path(path).exists():
            raise ConfigurationError(f"checkpoint {path} not found")
        if _sha256(Path(path)) != manifest.base_sha256[name]:
            raise ConfigurationError(f"checkpoint {path} changed since the run")
    small = checkpoint.load(manifest.base_checkpoints["small"])
    large = (checkpoint.load(manifest.base_checkpoints["large"])
             if "large" in manifest.base_checkpoints else None)
    if not manifest.round_checkpoints:
        return small, large, None, 0
    if round_ is None:
        round_ = max(manifest.round_checkpoints)
    if round_ not in manifest.round_checkpoints:
        raise InputError(f"no checkpoint for round {round_}; "
                         f"available: {sorted(manifest.round_checkpoints)}")
    adapter = deserialize(Path(manifest.round_checkpoints[round_]).read_bytes())
    return small, large, adapter, round_


def variants(mode: str, small, large, adapter, alpha: float) -> dict[str, object]:
    """Logit sources to evaluate for a run: the large base, the tuned small model, the proxy."""
    out: dict[str, object] = {}
    if large is not None:
        out["base"] = large
    if adapter is not None:
        tuned = AdaptedModel(small, adapter)
        out["small-tuned"] = tuned
        if large is not None:
            out[mode] = ProxyEnsemble(large, small, tuned, alpha)
    return out


@dataclass
class EvalResult:
    reports: dict[tuple[str, float | None], EvalReport]
    rows: list[dict]
    best_alpha: float | None


def cmd_eval(manifest: RunManifest, round_: int | None = None, dataset: str | None = None,
             alpha_sweep=None, out: str | Path | None = None,
             examples: list[Example] | None = None) -> EvalResult:
    """Evaluate the run's variants at one saved round; proxy variants once per alpha."""
    cfg = manifest.experiment
    ev = cfg.eval
    dataset = dataset or ev.split
    sweep = tuple(alpha_sweep or ev.alpha_sweep)
    small, large, adapter, round_ = _load_run(manifest, round_)
    if examples is None:
        examples = build_corpus(cfg).split(dataset)
        if ev.limit:
            examples = examples[:ev.limit]
    mode = cfg.federation.mode
    kw = dict(seeds=ev.seeds, max_len=ev.max_len, sample=ev.sample,
              temperature=ev.temperature, top_p=ev.top_p)
    reports: dict = {}
    rows: list[dict] = []
    for name, src in variants(mode, small, large, adapter, sweep[0]).items():
        is_proxy = isinstance(src, ProxyEnsemble)
        for a in (sweep if is_proxy else (None,)):
            s = src.with_alpha(a) if is_proxy else src
            r = evaluate(s, examples, **kw)
            r.settings["alpha"] = a
            r.settings["variant"] = name
            reports[(name, a)] = r
            rows += report_rows(r, round=round_, dataset=dataset, variant=name, alpha=a)
    proxy = [(k, r) for k, r in reports.items() if k[1] is not None]
    best = max(proxy, key=lambda kr: (kr[1].rouge_l, -kr[0][1]))[0][1] if proxy else None
    result = EvalResult(reports, rows, best)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"round_{round_:03d}_{dataset}"
        (d / f"{stem}.json").write_text(json.dumps(
            {"round": round_, "dataset": dataset, "best_alpha": best,
             "reports": [r.to_dict() for r in reports.values()]}, indent=2))
        with open(d / f"{stem}.jsonl", "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    return result


def format_report(result: EvalResult) -> str:
    lines = [f"{'variant':<16}{'alpha':>7}{'rouge_l x100':>14}{'std':>8}{'dist-3':>8}"
             f"{'dist-4':>8}{'fail':>6}"]
    for (name, a), r in result.reports.items():
        d3, d4 = (r.dist.get(n) for n in (3, 4))
        fmt = lambda v: "  n/a" if v is None else f"{v:.3f}"  # noqa: E731
        lines.append(f"{name:<16}{'-' if a is None else a:>7}{100 * r.rouge_l:>14.2f}"
                     f"{100 * r.rouge_l_std:>8.2f}{fmt(d3):>8}{fmt(d4):>8}{r.failures:>6}")
    if result.best_alpha is not None:
        lines.append(f"best alpha: {result.best_alpha}")
    return "\n".join(lines)


def cmd_decode(manifest: RunManifest, instruction: str, input_text: str = "",
               alpha: float | None = None, round_: int | None = None,
               side_by_side: bool = False, max_len: int | None = None) -> dict[str, str]:
    """Greedy generations for one prompt: the proxy output, plus the others on request."""
    if not instruction.strip():
        raise InputError("prompt text is empty")
    cfg = manifest.experiment
    small, large, adapter, _ = _load_run(manifest, round_)
    alpha = cfg.federation.alpha if alpha is None else alpha
    srcs = variants(cfg.federation.mode, small, large, adapter, alpha)
    if not side_by_side:
        key = cfg.federation.mode if cfg.federation.mode in srcs else next(reversed(srcs))
        srcs = {key: srcs[key]}
    prompt = [small.config.vocab.bos] + tokenize(format_prompt(instruction, input_text))
    limit = max_len or cfg.eval.max_len
    return {name: detokenize(strip_specials(greedy_decode(s, prompt, limit)))
            for name, s in srcs.items()}


def cmd_partition_inspect(cfg: ExperimentConfig) -> DevicePartition:
    return build_partition(cfg, build_corpus(cfg))


def format_partition(p: DevicePartition) -> str:
    width = max(6, *(len(c) for c in p.categories))
    head = "device " + "".join(f"{c:>{width + 1}}" for c in p.categories) + "   total"
    rows = [f"{n:>6} " + "".join(f"{int(v):>{width + 1}}" for v in h) + f"{int(h.sum()):>8}"
            for n, h in enumerate(p.histograms)]
    return "\n".join([head, *rows])
