"""Command-line entry point: synth, split, train, eval, itq, simmat, ablate, import-csv."""
from __future__ import annotations

import argparse
import difflib
import io
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields

from . import __version__, kernels
from .ablation import AblationSetup, ablation_table, run_ablation
from .data import (
    FeatureFileError,
    FeatureSet,
    SynthConfig,
    encode_features,
    format_split,
    generate_synthetic,
    load_csv,
    load_features,
    load_split,
    make_zero_shot_split,
    restrict,
)
from .model import CheckpointError, encode, encode_checkpoint, load_checkpoint
from .numkit import RNG_ALGORITHM, NumericError, make_rng
from .retrieval import (
    AP_VARIANT,
    PREC_DIVISOR,
    ProtocolError,
    evaluate,
    itq_encode,
    itq_fit,
    similarity_csv,
    similarity_matrix,
)
from .trainer import TrainConfig, train

log = logging.getLogger("domainsmooth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SEED_ENV = "DSN_SEED"


class ConfigError(Exception):
    pass


# keys that belong to neither TrainConfig nor SynthConfig
EXTRA_DEFAULTS = {
    "n_unseen": 5,
    "bits": 64,
    "itq_iters": 50,
    "metric": "cosine",
    "n_seeds": 5,
    "profile": "standard",
}

# Settings under which the four-way ablation separates within a desk-scale
# budget. The plain defaults train too slowly from scratch to move the
# embeddings, so every variant lands near the same score.
PROFILES = {
    "standard": {},
    "bench": {
        "lr_initial": 1e-2,
        "lr_final": 1e-5,
        "teacher_scale": 3.0,
        "latent_dim": 16,
        "hidden": 128,
        "image_noise": 0.5,
        "sketch_noise": 1.0,
    },
}

CHOICES = {"metric": ("cosine", "hamming"), "profile": tuple(PROFILES)}


def _key_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for dc in (TrainConfig, SynthConfig):
        for f in fields(dc):
            types[f.name] = {"int | None": "optional_int"}.get(str(f.type), f.type)
    for k, v in EXTRA_DEFAULTS.items():
        types[k] = type(v).__name__
    return types


KEY_TYPES = _key_types()
DEFAULTS = {
    **{f.name: f.default for f in fields(SynthConfig)},
    **{f.name: f.default for f in fields(TrainConfig)},
    **EXTRA_DEFAULTS,
}


def parse_value(key: str, text: str):
    kind = KEY_TYPES[key]
    s = text.strip()
    try:
        if kind == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(s)
        if kind == "float":
            return float(s)
        if kind == "optional_int":
            return None if s.lower() in ("none", "") else int(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    if key in CHOICES and s not in CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {', '.join(CHOICES[key])}, got {s!r}")
    return s


def unknown_key(key: str) -> ConfigError:
    close = difflib.get_close_matches(key, list(KEY_TYPES), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        if key not in KEY_TYPES:
            raise unknown_key(key)
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict
    provenance: dict
    command: str
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**{f.name: self.values[f.name] for f in fields(TrainConfig)})

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(**{f.name: self.values[f.name] for f in fields(SynthConfig)})

    def metadata(self) -> dict[str, str]:
        meta = {"run.command": self.command, "run.version": __version__, "run.rng": RNG_ALGORITHM}
        for k in sorted(self.values):
            meta[f"config.{k}"] = f"{self.values[k]!r} ({self.provenance[k]})"
        for k, v in sorted(self.inputs.items()):
            meta[f"input.{k}"] = str(v)
        meta["kernels.backend"] = kernels.BACKEND
        meta["loss.reduction"] = "cmcm=sum,cls=sum,ask=sum,ml=mean"
        meta["eval.ap_variant"] = AP_VARIANT
        meta["eval.prec_divisor"] = PREC_DIVISOR
        return meta


def load_config(command: str, file_values: dict[str, str], flag_values: dict[str, str],
                env=None, default_profile: str = "standard") -> RunConfig:
    """Resolve every key: flag over file over environment over profile over default."""
    env = os.environ if env is None else env
    for key in list(file_values) + list(flag_values):
        if key not in KEY_TYPES:
            raise unknown_key(key)
    values = dict(DEFAULTS)
    prov = {k: "default" for k in values}
    values["profile"] = default_profile
    if default_profile != DEFAULTS["profile"]:
        prov["profile"] = f"default:{command}"
    if SEED_ENV in env:
        values["seed"] = parse_value("seed", env[SEED_ENV])
        prov["seed"] = f"env:{SEED_ENV}"
    for source, raw in (("file", file_values), ("flag", flag_values)):
        for k, v in raw.items():
            values[k] = parse_value(k, v)
            prov[k] = source
    for k, v in PROFILES[values["profile"]].items():
        if prov[k] == "default":
            values[k] = v
            prov[k] = f"profile:{values['profile']}"
    cfg = RunConfig(values, prov, command)
    try:
        cfg.train, cfg.synth
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for k in ("n_unseen", "bits", "itq_iters", "n_seeds"):
        if values[k] < 1:
            raise ConfigError(f"{k} must be >= 1")
    return cfg


def metadata_block(meta: dict[str, str]) -> str:
    return "".join(f"# {k}={meta[k]}\n" for k in sorted(meta))


def commit_outputs(outputs: dict) -> None:
    """Write every output to a temp file first and rename only when all succeeded."""
    staged = []
    try:
        for path, data in outputs.items():
            fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data if isinstance(data, bytes) else data.encode("utf-8"))
        for tmp, path in staged:
            os.replace(tmp, path)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


# --- argument parsing -----------------------------------------------------


class Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and suggests the nearest known flag."""

    def error(self, message):
        if "unrecognized arguments" in message:
            known = []
            for a in self._actions:
                known += a.option_strings
                for sub in getattr(a, "choices", None) or {}:
                    if isinstance(a.choices[sub], argparse.ArgumentParser):
                        known += [s for b in a.choices[sub]._actions for s in b.option_strings]
            for word in message.split(":", 1)[1].split():
                close = difflib.get_close_matches(word.split("=")[0], known, n=1)
                if close:
                    message += f" (did you mean {close[0]}?)"
                    break
        raise ConfigError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (each flag mirrors a config-file key)")
    g.add_argument("--config", metavar="FILE", help="plain-text key=value file")
    for key in sorted(KEY_TYPES):
        opts = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        g.add_argument(*opts, dest=f"cfg_{key}", metavar="V", default=None,
                       help=f"default {DEFAULTS[key]!r}")


# inputs are validated before any work; outputs need a writable parent directory
COMMANDS = {
    "synth": dict(help="generate synthetic image and sketch feature files",
                  outputs=("images", "sketches", "meta"), inputs=()),
    "split": dict(help="draw a seen/unseen category split",
                  outputs=("out",), inputs=("images",)),
    "train": dict(help="train on the seen categories; writes a checkpoint and a loss log",
                  outputs=("checkpoint", "log", "bank"), inputs=("images", "sketches", "split")),
    "eval": dict(help="retrieval on the unseen categories; writes a per-query report",
                 outputs=("out",), inputs=("checkpoint", "images", "sketches", "split")),
    "itq": dict(help="fit ITQ on seen-category image embeddings and hash a feature file",
                outputs=("out",), inputs=("checkpoint", "images", "split", "encode")),
    "simmat": dict(help="unseen-category sketch/image similarity matrix as CSV",
                   outputs=("out",), inputs=("checkpoint", "images", "sketches", "split")),
    "ablate": dict(help="run the four loss-ablation variants and print the comparison table",
                   outputs=("out",), inputs=()),
    "import-csv": dict(help="convert a label,x0,x1,... CSV into a feature file",
                       outputs=("out",), inputs=("csv",)),
}

OPTIONAL_PATHS = {"bank", "meta", "out:ablate"}


def build_parser() -> Parser:
    parser = Parser(prog="domainsmooth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        for arg in spec["inputs"] + spec["outputs"]:
            optional = arg in OPTIONAL_PATHS or f"{arg}:{name}" in OPTIONAL_PATHS
            p.add_argument(f"--{arg}", metavar="PATH", required=not optional)
        if name == "import-csv":
            p.add_argument("--modality", choices=("image", "sketch"), required=True)
        _add_config_flags(p)
    return parser


def check_paths(args, spec) -> dict:
    paths = {}
    for arg in spec["inputs"]:
        path = getattr(args, arg)
        if not os.path.isfile(path):
            raise ConfigError(f"--{arg}: no such file: {path}")
        paths[arg] = path
    outs = []
    for arg in spec["outputs"]:
        path = getattr(args, arg)
        if path is None:
            continue
        parent = os.path.dirname(os.path.abspath(path))
        if os.path.isdir(path):
            raise ConfigError(f"--{arg}: is a directory: {path}")
        if not os.path.isdir(parent):
            raise ConfigError(f"--{arg}: directory does not exist: {parent}")
        if not os.access(parent, os.W_OK):
            raise ConfigError(f"--{arg}: directory is not writable: {parent}")
        outs.append(os.path.abspath(path))
        paths[arg] = path
    if len(set(outs)) != len(outs):
        raise ConfigError("two outputs point at the same file")
    for arg in spec["inputs"]:
        if os.path.abspath(paths[arg]) in outs:
            raise ConfigError(f"--{arg} is also used as an output")
    return paths


# --- commands -------------------------------------------------------------


def _seen_unseen(cfg: RunConfig, *sets: FeatureSet):
    split = load_split(cfg.paths["split"])
    return split, [(restrict(s, split.seen), restrict(s, split.unseen)) for s in sets]


def cmd_synth(cfg: RunConfig) -> dict:
    img, ske = generate_synthetic(cfg.synth)
    meta = metadata_block(cfg.metadata())
    out = {cfg.paths["images"]: encode_features(img), cfg.paths["sketches"]: encode_features(ske)}
    if "meta" in cfg.paths:
        out[cfg.paths["meta"]] = meta
    else:
        sys.stderr.write(meta)
    return out


def cmd_split(cfg: RunConfig) -> dict:
    img = load_features(cfg.paths["images"])
    split = make_zero_shot_split(img.categories(), cfg["n_unseen"], make_rng([cfg["seed"], 1]))
    return {cfg.paths["out"]: metadata_block(cfg.metadata()) + format_split(split)}


def cmd_train(cfg: RunConfig) -> dict:
    img, ske = load_features(cfg.paths["images"]), load_features(cfg.paths["sketches"])
    _, [(seen_img, _), (seen_ske, _)] = _seen_unseen(cfg, img, ske)
    res = train(cfg.train, seen_img, seen_ske)
    res.log.metadata.update(cfg.metadata())
    out = {cfg.paths["checkpoint"]: encode_checkpoint(res.params), cfg.paths["log"]: res.log.to_csv()}
    if "bank" in cfg.paths:
        out[cfg.paths["bank"]] = metadata_block(cfg.metadata()) + res.bank.to_csv()
    return out


def _load_model(cfg: RunConfig, d_in: int):
    params = load_checkpoint(cfg.paths["checkpoint"])
    if params.dims["d_in"] != d_in:
        raise ConfigError(f"checkpoint expects {params.dims['d_in']}-dim inputs, features have {d_in}")
    return params


def _fit_itq(cfg: RunConfig, params, seen_img: FeatureSet):
    return itq_fit(encode(params, seen_img.features), cfg["bits"], make_rng([cfg["seed"], 2]),
                   iters=cfg["itq_iters"])


def cmd_eval(cfg: RunConfig) -> dict:
    img, ske = load_features(cfg.paths["images"]), load_features(cfg.paths["sketches"])
    _, [(seen_img, gallery), (_, queries)] = _seen_unseen(cfg, img, ske)
    params = _load_model(cfg, img.dim)
    itq = _fit_itq(cfg, params, seen_img) if cfg["metric"] == "hamming" else None
    rep = evaluate(params, queries, gallery, cfg["metric"], itq)
    rep.metadata.update(cfg.metadata())
    print(rep.summary())
    return {cfg.paths["out"]: rep.to_csv()}


def cmd_itq(cfg: RunConfig) -> dict:
    img = load_features(cfg.paths["images"])
    _, [(seen_img, _)] = _seen_unseen(cfg, img)
    params = _load_model(cfg, img.dim)
    target = load_features(cfg.paths["encode"])
    if target.dim != img.dim:
        raise ConfigError("--encode features have a different dimension from --images")
    model = _fit_itq(cfg, params, seen_img)
    codes = itq_encode(model, encode(params, target.features))
    meta = cfg.metadata()
    meta["itq.final_loss"] = repr(model.loss_trace[-1])
    meta["itq.max_orth_error"] = repr(max(model.orth_trace))
    buf = io.StringIO()
    buf.write(metadata_block(meta))
    buf.write("index,label,code\n")
    for i, (y, row) in enumerate(zip(target.labels, codes)):
        buf.write(f"{i},{int(y)},{''.join('1' if b else '0' for b in row)}\n")
    return {cfg.paths["out"]: buf.getvalue()}


def cmd_simmat(cfg: RunConfig) -> dict:
    img, ske = load_features(cfg.paths["images"]), load_features(cfg.paths["sketches"])
    split, [(_, gallery), (_, queries)] = _seen_unseen(cfg, img, ske)
    params = _load_model(cfg, img.dim)
    cats, mat = similarity_matrix(params, queries, gallery, sorted(split.unseen))
    return {cfg.paths["out"]: metadata_block(cfg.metadata()) + similarity_csv(cats, mat)}


def cmd_ablate(cfg: RunConfig) -> dict:
    seeds = tuple(cfg["seed"] + i for i in range(cfg["n_seeds"]))
    setup = AblationSetup(cfg.synth, cfg.train, cfg["n_unseen"], cfg["bits"], seeds, cfg["itq_iters"])
    t0 = time.perf_counter()
    text = metadata_block(cfg.metadata()) + ablation_table(run_ablation(setup))
    log.info("ablation finished in %.1f s", time.perf_counter() - t0)
    print(text, end="")
    return {cfg.paths["out"]: text} if "out" in cfg.paths else {}


def cmd_import_csv(cfg: RunConfig) -> dict:
    fs = load_csv(cfg.paths["csv"], cfg.options["modality"])
    return {cfg.paths["out"]: encode_features(fs)}


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "itq": cmd_itq,
    "simmat": cmd_simmat,
    "ablate": cmd_ablate,
    "import-csv": cmd_import_csv,
}


def dispatch(argv=None, env=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = COMMANDS[args.command]
        paths = check_paths(args, spec)
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        cfg = load_config(args.command, file_values, flags, env,
                          default_profile="bench" if args.command == "ablate" else "standard")
        cfg.paths = paths
        cfg.inputs = {a: paths[a] for a in spec["inputs"]}
        if args.command == "import-csv":
            cfg.options["modality"] = args.modality
        outputs = HANDLERS[args.command](cfg)
        commit_outputs(outputs)
    except (ConfigError, ProtocolError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FeatureFileError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())

