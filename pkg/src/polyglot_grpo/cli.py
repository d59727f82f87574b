"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 remote-backend error.
Errors are also reported as one JSON object on standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalrep, grpo, pipeline, policy
from .config import ConfigError, RunConfig, load_config
from .core import DatasetError, ResourceTier, dump_dataset, load_dataset, make_splits, select
from .judge import HttpTransport, Judge, JudgeError, RemoteBackendError, ReplyCache, offline_transport
from .service import ScoreRequest, create_app, score_request, serve_stdio

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_REMOTE = 0, 2, 3, 4

log = logging.getLogger("polyglot_grpo")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


# --- helpers ---------------------------------------------------------------------

def _read_jsonl(path: str) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"input file not found: {p}")
    out = []
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{p}:{n}: invalid JSON ({exc.msg})") from None
    return out


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"input file not found: {p}")
    return p


def _toy(cfg: RunConfig) -> policy.ToyTask:
    keys = {ResourceTier.HIGH: cfg.toy.keys_high, ResourceTier.MEDIUM: cfg.toy.keys_medium,
            ResourceTier.LOW: cfg.toy.keys_low}
    return policy.ToyTask(policy.ToyVocab(), keys, cfg.toy.pivot_prob, seed=cfg.toy.seed)


def _toy_instances(cfg: RunConfig, task: policy.ToyTask, dataset: str | None):
    if dataset is None:
        return task.instances()
    data = load_dataset(_require(dataset))
    for inst in data:
        try:
            task.prompt(inst)
        except KeyError:
            raise DatasetError(f"{inst.id!r} is not expressible in the toy vocabulary; "
                               "the desk-scale policy trains on toy-task instances only") from None
    return data


def _splits(cfg: RunConfig, instances):
    split = make_splits(instances, cfg.train.split_seed)
    return select(instances, split.train_sft), select(instances, split.train_rft)


def _sft(cfg: RunConfig, task, sft_instances):
    init = policy.english_centric_init(task.vocab, cfg.policy.n_features, cfg.policy.prior_strength,
                                       cfg.policy.temperature)
    return policy.sft_fit(init, task, sft_instances, cfg.sft_config())


# --- subcommands -------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    task = _toy(cfg)
    instances = _toy_instances(cfg, task, args.dataset)
    sft_set, rft_set = _splits(cfg, instances)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "sft":
        params, report = _sft(cfg, task, sft_set)
        policy.save_checkpoint(params, out / "sft.npz")
        report.write(out / "sft_report.jsonl")
        last = report.records[-1]
        print(json.dumps({"stage": "sft", "checkpoint": str(out / "sft.npz"), "nll": last["nll"],
                          "digest": report.digest}))
        return EXIT_OK

    if args.init:
        params = policy.load_checkpoint(_require(args.init), task.vocab)
    else:
        params, sft_report = _sft(cfg, task, sft_set)
        policy.save_checkpoint(params, out / "sft.npz")
        sft_report.write(out / "sft_report.jsonl")

    def checkpoint(p, step):
        policy.save_checkpoint(p, out / f"grpo_step{step:04d}.npz")

    params, report = grpo.train(params, task, grpo.tier_pools(rft_set), cfg.schedule_config(),
                                cfg.reward_config(), cfg.grpo_config(), cfg.train.seed,
                                checkpoint_every=cfg.train.checkpoint_every, checkpoint_fn=checkpoint)
    policy.save_checkpoint(params, out / "grpo.npz")
    report.write(out / "grpo_report.jsonl")
    phases = sorted({r["phase"] for r in report.records})
    print(json.dumps({"stage": "grpo", "checkpoint": str(out / "grpo.npz"), "steps": len(report.records),
                      "phases": phases, "digest": report.digest}))
    return EXIT_OK


def cmd_reward(args, cfg: RunConfig) -> int:
    rc = cfg.reward_config()
    judge = Judge(rc.backend)
    lines = []
    for n, rec in enumerate(_read_jsonl(args.input), start=1):
        try:
            req = ScoreRequest(id=str(rec["id"]) if "id" in rec else None, question=rec["question"], gold=rec.get("gold", rec.get("gold_answer")),
                               output=rec["output"], language=rec["language"],
                               scope=rec.get("scope"), weights=rec.get("weights"))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{args.input}:{n}: bad record ({str(exc).splitlines()[0]})") from None
        try:
            reply = score_request(req, rc, judge).model_dump(mode="json", exclude_none=True)
        except ValueError as exc:
            raise DatasetError(f"{args.input}:{n}: {exc}") from None
        lines.append(json.dumps(reply, ensure_ascii=False, sort_keys=True))
    text = "".join(l + "\n" for l in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _client(cfg: RunConfig, section, cache: ReplyCache):
    if cfg.pipeline.offline:
        transport = offline_transport
    elif section.endpoint:
        transport = HttpTransport(section.endpoint)
    else:
        raise ConfigError("pipeline endpoint missing (set an endpoint or pipeline.offline=true)")
    return pipeline.make_client(section.model_name, transport, cache, section.max_tokens,
                                section.temperature, section.max_retries)


def cmd_pipeline(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    verdicts = pipeline.VerdictLog()
    if args.stage == "split":
        data = load_dataset(_require(args.input))
        seed = pc.split_seed if args.seed is None else args.seed
        Path(args.out).write_text(make_splits(data, seed).dumps() + "\n", encoding="utf-8")
        return EXIT_OK

    cache = ReplyCache(pc.cache_path)
    if args.stage == "generate":
        client = _client(cfg, pc.generator, cache)
        items = pipeline.generate_mcqs(client, args.n or pc.n_questions, pc.topics, verdicts=verdicts)
        pipeline.dump_mcqs(items, args.out)
    elif args.stage == "filter":
        items = pipeline.load_mcqs(_require(args.input))
        if not pc.probes:
            raise ConfigError("pipeline.probes is empty; at least one probe endpoint is required")
        probes = {name: _client(cfg, sec, cache) for name, sec in pc.probes.items()}
        kept, _, _ = pipeline.difficulty_filter(items, probes, pc.concurrency, verdicts)
        kept, _ = pipeline.ambiguity_filter(kept, _client(cfg, pc.reviewer, cache), pc.concurrency, verdicts)
        pipeline.dump_mcqs(kept, args.out)
    elif args.stage == "convert":
        items = pipeline.load_mcqs(_require(args.input))
        instances = pipeline.convert_all(_client(cfg, pc.converter, cache), items, pc.concurrency, verdicts)
        dump_dataset(pipeline.dedup(instances, verdicts), args.out)
    if args.log:
        verdicts.write(args.log)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    testset = load_dataset(_require(args.testset))
    try:
        outputs = evalrep.load_outputs(_require(args.outputs))
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"{args.outputs}: unreadable outputs ({exc})") from None
    judge = Judge(cfg.backend())
    remote_lc = judge if cfg.eval.lc_verifier == "remote" else None
    records = evalrep.evaluate(outputs, testset, judge, cfg.langid.threshold, remote_lc)
    if args.records:
        Path(args.records).write_text(
            "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for r in records),
            encoding="utf-8")
    sys.stdout.write(evalrep.render(evalrep.summarize(records), args.format))
    return EXIT_OK


def cmd_serve(args, cfg: RunConfig) -> int:
    rc = cfg.reward_config()
    judge = Judge(rc.backend)
    if args.stdio:
        return serve_stdio(rc, judge)
    if args.port is None:
        raise ConfigError("serve needs --port N or --stdio")
    import uvicorn

    uvicorn.run(create_app(rc, judge), host=cfg.service.host, port=args.port,
                limit_concurrency=cfg.service.concurrency, log_level="warning")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="polyglot-grpo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pp = sub.add_parser("pipeline", help="benchmark curation stages", parents=[common])
    pp.add_argument("stage", choices=["generate", "filter", "convert", "split"])
    pp.add_argument("--in", dest="input")
    pp.add_argument("--out", required=True)
    pp.add_argument("--log", help="write the verdict log (JSON lines) here")
    pp.add_argument("--n", type=int, help="number of questions to generate")
    pp.add_argument("--seed", type=int, help="split seed")

    pr = sub.add_parser("reward", help="score completions", parents=[common])
    pr.add_argument("action", choices=["score"])
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out")

    pt = sub.add_parser("train", help="SFT or curriculum GRPO on the toy task", parents=[common])
    pt.add_argument("stage", choices=["sft", "grpo"])
    pt.add_argument("--profile", choices=["toy", "full"])
    pt.add_argument("--seed", type=int)
    pt.add_argument("--dataset", help="dataset JSON of toy-task instances (default: the full toy task)")
    pt.add_argument("--init", help="starting checkpoint for grpo (default: run SFT first)")
    pt.add_argument("--out", default="runs/latest")

    pe = sub.add_parser("eval", help="LA/LC evaluation", parents=[common])
    pe.add_argument("--outputs", required=True)
    pe.add_argument("--testset", required=True)
    pe.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    pe.add_argument("--records", help="write EvalRecords (JSON lines) here")

    ps = sub.add_parser("serve", help="reward-scoring service", parents=[common])
    ps.add_argument("--port", type=int)
    ps.add_argument("--stdio", action="store_true", help="line-delimited JSON on stdin/stdout")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        overrides = list(args.set)
        if getattr(args, "profile", None):
            overrides.append(f"train.profile={args.profile}")
        if getattr(args, "seed", None) is not None and args.command == "train":
            overrides.append(f"train.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.command in ("pipeline", "reward") and getattr(args, "input", None) is None \
                and not (args.command == "pipeline" and args.stage == "generate"):
            raise ConfigError(f"{args.command} needs --in FILE")
        handler = {"train": cmd_train, "reward": cmd_reward, "pipeline": cmd_pipeline,
                   "eval": cmd_eval, "serve": cmd_serve}[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (RemoteBackendError, JudgeError) as exc:
        return _fail(EXIT_REMOTE, "remote", str(exc))
    except (DatasetError, pipeline.PipelineError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
