"""End-to-end experiment: for every configured direction, prepare shared
splits and vocabulary, train the baseline and multitask regimes, translate
the test split with both, score them, and assemble the comparison report.

Both regimes inside one experiment share splits, vocabulary, initialization
seed and decode settings; they differ only in the auxiliary objective (and,
if the paper-faithful batch asymmetry is configured, the batch size).
Completed stages are cached in the output directory's manifest, keyed by a
fingerprint of the configuration that feeds them.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from minimt import synthetic
from minimt.config import (
    ConfigError,
    ExperimentConfig,
    build_decode_config,
    build_model_config,
    build_optimizer_config,
    build_train_config,
    config_from_dict,
    mono_split_config,
    parallel_split_config,
)
from minimt.data import (
    CorpusError,
    Vocabulary,
    build_vocab,
    encode,
    frame_source,
    load_monolingual,
    load_parallel,
    read_lines,
    split_indices,
)
from minimt.decoding import beam_search
from minimt.evaluation import ComparisonReport, compare_report, corpus_bleu
from minimt.model import FreezeSpec, ModelConfig, init_params
from minimt.training import (
    PAPER_LR,
    TrainData,
    config_fingerprint,
    load_checkpoint,
    restore_checkpoint,
    train_loop,
)

logger = logging.getLogger(__name__)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dir_name(direction: str) -> str:
    return direction.replace("->", "-")


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.vocab_path = self.out / "vocab.txt"
        self.manifest_path = self.out / "manifest.json"
        self.manifest = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())

    # --- stage machinery -----------------------------------------------------

    def _save_manifest(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def _stage(self, name: str, fingerprint: str, outputs, build) -> bool:
        """Run ``build`` unless this stage already completed with the same
        fingerprint and its outputs still exist. Returns True when built."""
        outs = [str(p) for p in outputs]
        entry = self.manifest.get("stages", {}).get(name)
        if (entry and entry.get("fingerprint") == fingerprint
                and entry.get("outputs") == outs and all(Path(p).exists() for p in outs)):
            logger.info("[%s] cached", name)
            return False
        logger.info("[%s] running", name)
        try:
            build()
        except StageFailure:
            raise
        except Exception as e:
            raise StageFailure(name, e) from e
        self.manifest.setdefault("stages", {})[name] = {
            "fingerprint": fingerprint, "outputs": outs}
        self._save_manifest()
        return True

    # --- prepare ---------------------------------------------------------------

    def _manifest_file(self, corpus: str) -> Path:
        return self.out / "manifests" / f"{corpus}.json"

    def prepare(self) -> bool:
        """Build the shared vocabulary and persist the split manifests."""
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.validate_files()
        data = self.config.data
        fp = config_fingerprint({"seed": self.config.seed, "data": self.config.to_dict()["data"]})
        mono_langs = sorted(data.mono_files)
        outputs = [self.vocab_path, self._manifest_file("parallel"),
                   *(self._manifest_file(f"mono_{l}") for l in mono_langs)]

        def build():
            (self.out / "manifests").mkdir(parents=True, exist_ok=True)
            src_lines = read_lines(data.parallel_src_file)
            tgt_lines = read_lines(data.parallel_tgt_file)
            if len(src_lines) != len(tgt_lines):
                raise CorpusError(
                    f"line counts differ: {data.parallel_src_file} has {len(src_lines)}, "
                    f"{data.parallel_tgt_file} has {len(tgt_lines)}")
            all_lines = src_lines + tgt_lines
            mono_lines = {}
            for lang in mono_langs:
                mono_lines[lang] = read_lines(data.mono_files[lang])
                all_lines += mono_lines[lang]
            vocab = build_vocab(all_lines, languages=self.config.languages,
                                mode=data.tokenize_mode, min_count=data.min_count)
            vocab.save(self.vocab_path)

            def write_manifest(corpus, n_lines, split_cfg):
                try:
                    idx = split_indices(n_lines, split_cfg)
                except CorpusError as e:
                    raise CorpusError(f"corpus {corpus!r}: {e}") from None
                payload = {"corpus": corpus, "n_lines": n_lines, "seed": split_cfg.seed,
                           "sizes": split_cfg.sizes(), "indices": idx}
                self._manifest_file(corpus).write_text(
                    json.dumps(payload, indent=2, sort_keys=True) + "\n")

            write_manifest("parallel", len(src_lines), parallel_split_config(self.config))
            for lang in mono_langs:
                write_manifest(f"mono_{lang}", len(mono_lines[lang]), mono_split_config(self.config))

        return self._stage("prepare", fp, outputs, build)

    def _prepare_fingerprint(self) -> str:
        entry = self.manifest.get("stages", {}).get("prepare")
        if not entry:
            raise ConfigError("prepare has not run; run the prepare stage first")
        return entry["fingerprint"]

    def _load_vocab(self) -> Vocabulary:
        return Vocabulary.load(self.vocab_path, mode=self.config.data.tokenize_mode)

    def _load_indices(self, corpus: str) -> dict:
        return json.loads(self._manifest_file(corpus).read_text())["indices"]

    def _direction_files(self, direction: str):
        a, _, b = direction.partition("->")
        data = self.config.data
        if a == data.src_lang:
            return a, b, data.parallel_src_file, data.parallel_tgt_file
        return a, b, data.parallel_tgt_file, data.parallel_src_file

    def _run_dir(self, direction: str, regime: str) -> Path:
        return self.out / _dir_name(direction) / regime

    # --- train -------------------------------------------------------------------

    def train(self, direction: str, regime: str) -> Path:
        if regime not in ("baseline", "mtl"):
            raise ConfigError(f"regime must be 'baseline' or 'mtl', got {regime!r}")
        run_dir = self._run_dir(direction, regime)
        ckpt_path = run_dir / "checkpoint.npz"
        log_path = run_dir / "metrics.tsv"
        train_cfg = build_train_config(self.config, regime)
        fp = config_fingerprint({
            "prepare": self._prepare_fingerprint(), "direction": direction, "regime": regime,
            "model": self.config.to_dict()["model"], "train": self.config.to_dict()["train"],
            "optimizer": self.config.to_dict()["optimizer"], "seed": self.config.seed})

        def build():
            src_lang, tgt_lang, src_file, tgt_file = self._direction_files(direction)
            if regime == "mtl":
                missing = [l for l in (src_lang, tgt_lang) if l not in self.config.data.mono_files]
                if missing:
                    raise ConfigError(
                        f"multitask training needs monolingual corpora for {missing}; "
                        "set data.mono_files")
            run_dir.mkdir(parents=True, exist_ok=True)
            vocab = self._load_vocab()
            parallel = load_parallel(src_file, tgt_file, parallel_split_config(self.config),
                                     vocab, src_lang, tgt_lang,
                                     indices=self._load_indices("parallel"))
            mono = {}
            if regime == "mtl":
                for lang in (src_lang, tgt_lang):
                    mono[lang] = load_monolingual(
                        self.config.data.mono_files[lang], mono_split_config(self.config),
                        vocab, lang, indices=self._load_indices(f"mono_{lang}"))
            model = init_params(build_model_config(self.config, len(vocab)),
                                multitask=(regime == "mtl"))
            freeze = (FreezeSpec.first_half_encoder(model)
                      if self.config.train.freeze == "first_half" else FreezeSpec.none())
            log_path.unlink(missing_ok=True)
            train_loop(model, TrainData(vocab, parallel, mono), train_cfg,
                       build_optimizer_config(self.config), freeze_spec=freeze,
                       log_path=log_path, checkpoint_path=ckpt_path)
            # decorate the checkpoint with what translate needs to stand alone
            ckpt = load_checkpoint(ckpt_path)
            meta = {"src_lang": src_lang, "tgt_lang": tgt_lang, "regime": regime,
                    "vocab_sha": _sha256_file(self.vocab_path),
                    "tokenize_mode": self.config.data.tokenize_mode,
                    "model_config": self.config.to_dict()["model"] | {
                        "vocab_size": len(vocab), "seed": self.config.seed},
                    "multitask": regime == "mtl"}
            _rewrite_checkpoint_meta(ckpt_path, meta)

        self._stage(f"train:{direction}:{regime}", fp, [ckpt_path, log_path], build)
        return ckpt_path

    # --- translate ------------------------------------------------------------------

    def translate(self, direction: str, regime: str) -> Path:
        run_dir = self._run_dir(direction, regime)
        hyp_path = run_dir / "hypotheses.txt"
        ref_path = run_dir / "references.txt"
        train_entry = self.manifest.get("stages", {}).get(f"train:{direction}:{regime}")
        if not train_entry:
            raise ConfigError(f"train stage for {direction}/{regime} has not run")
        fp = config_fingerprint({"train": train_entry["fingerprint"],
                                 "decode": self.config.to_dict()["decode"]})

        def build():
            src_lang, tgt_lang, src_file, tgt_file = self._direction_files(direction)
            vocab = self._load_vocab()
            indices = self._load_indices("parallel")["test"]
            src_lines = read_lines(src_file)
            tgt_lines = read_lines(tgt_file)
            model = _model_from_checkpoint(run_dir / "checkpoint.npz")
            decode_cfg = build_decode_config(self.config, vocab, tgt_lang)
            hyps, refs = [], []
            for i in indices:
                hyps.append(translate_line(model, src_lines[i], vocab, src_lang, decode_cfg,
                                           self.config.model.max_len))
                refs.append(" ".join(tgt_lines[i].split()))
            hyp_path.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
            ref_path.write_text("".join(r + "\n" for r in refs), encoding="utf-8")

        self._stage(f"translate:{direction}:{regime}", fp, [hyp_path, ref_path], build)
        return hyp_path

    # --- evaluate ------------------------------------------------------------------

    def evaluate(self, direction: str, regime: str) -> Path:
        run_dir = self._run_dir(direction, regime)
        bleu_path = run_dir / "bleu.json"
        tr_entry = self.manifest.get("stages", {}).get(f"translate:{direction}:{regime}")
        if not tr_entry:
            raise ConfigError(f"translate stage for {direction}/{regime} has not run")
        fp = config_fingerprint({"translate": tr_entry["fingerprint"],
                                 "evaluation": self.config.to_dict()["evaluation"]})

        def build():
            ev = self.config.evaluation
            hyps = read_lines(run_dir / "hypotheses.txt")
            refs = read_lines(run_dir / "references.txt")
            pairs = [(h.split(), r.split()) for h, r in zip(hyps, refs)]
            report = corpus_bleu(pairs, max_n=ev.max_n, k=ev.smoothing_k,
                                 macro=(ev.aggregate == "macro"))
            payload = {"bleu": report.bleu, "brevity_penalty": report.brevity_penalty,
                       "hyp_len": report.hyp_len, "ref_len": report.ref_len,
                       "raw_precisions": report.raw_precisions,
                       "smoothed_precisions": report.smoothed_precisions,
                       "note": report.note}
            bleu_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

        self._stage(f"evaluate:{direction}:{regime}", fp, [bleu_path], build)
        return bleu_path

    # --- the whole protocol -----------------------------------------------------------

    def run(self) -> ComparisonReport:
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest["config_fingerprint"] = config_fingerprint(self.config.to_dict())
        self.manifest["seed"] = self.config.seed
        (self.out / "config.json").write_text(
            json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        self.prepare()
        baseline_scores, mtl_scores = {}, {}
        for direction in self.config.directions:
            for regime, scores in (("baseline", baseline_scores), ("mtl", mtl_scores)):
                self.train(direction, regime)
                self.translate(direction, regime)
                bleu_path = self.evaluate(direction, regime)
                scores[direction] = json.loads(bleu_path.read_text())["bleu"]
        report = compare_report(baseline_scores, mtl_scores, self.config.directions)
        (self.out / "report.txt").write_text(report.render_table(scale=100) + "\n")
        (self.out / "report.tsv").write_text(report.render_rows(scale=100) + "\n")
        self._save_manifest()
        return report


def _rewrite_checkpoint_meta(path, meta: dict) -> None:
    archive = np.load(path, allow_pickle=False)
    arrays = {k: archive[k] for k in archive.files if k != "__header__"}
    header = json.loads(bytes(archive["__header__"]).decode())
    header["meta"] = meta
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    model = init_params(ModelConfig(**meta["model_config"]), multitask=meta["multitask"])
    restore_checkpoint(model, None, ckpt)
    return model.eval()


def translate_line(model, line: str, vocab: Vocabulary, src_lang: str, decode_cfg,
                   max_len: int) -> str:
    """Beam-decode one raw source line into target-language text."""
    ids = encode(line, vocab, src_lang).ids[: max_len - 2]
    source = frame_source(ids, vocab, src_lang)
    best = beam_search(model, source, decode_cfg)[0]
    return " ".join(vocab.token(t) for t in best.tokens if not vocab.is_special(t))


# --- presets --------------------------------------------------------------------------


def make_preset(name: str, out_dir, seed: int = 0) -> ExperimentConfig:
    """Build one of the shipped experiment presets.

    smoke and desk generate their own synthetic bilingual fixture under
    <out_dir>/data; paper-faithful mirrors the full-scale protocol (splits,
    batch asymmetry, constant 1e-5 learning rate, 12+12 layers, freeze the
    first half) and expects real corpus paths to be filled in.
    """
    out_dir = str(out_dir)
    if name == "smoke":
        files = synthetic.generate_pair(Path(out_dir) / "data", n_parallel=140, n_mono=80,
                                        seed=seed, vocab_size=20, min_len=3, max_len=6)
        payload = {
            "seed": seed,
            "out_dir": out_dir,
            "directions": ["aa->bb", "bb->aa"],
            "data": {"src_lang": "aa", "tgt_lang": "bb",
                     "parallel_src_file": files["parallel_src"],
                     "parallel_tgt_file": files["parallel_tgt"],
                     "mono_files": {"aa": files["mono_aa"], "bb": files["mono_bb"]},
                     "parallel_split": [120, 10, 10], "mono_split": [80, 0, 0]},
            "model": {"d_model": 32, "n_heads": 2, "n_enc_layers": 2, "n_dec_layers": 2,
                      "d_ff": 64, "max_len": 24},
            "train": {"steps": 120, "batch_size": 8, "log_interval": 20},
            "optimizer": {"lr": 1e-3},
            "decode": {"beam_size": 2, "length_penalty": 1.2, "max_decode_len": 12},
        }
    elif name == "desk":
        files = synthetic.generate_pair(Path(out_dir) / "data", n_parallel=260, n_mono=150,
                                        seed=seed, vocab_size=30, min_len=3, max_len=8)
        payload = {
            "seed": seed,
            "out_dir": out_dir,
            "directions": ["aa->bb", "bb->aa"],
            "data": {"src_lang": "aa", "tgt_lang": "bb",
                     "parallel_src_file": files["parallel_src"],
                     "parallel_tgt_file": files["parallel_tgt"],
                     "mono_files": {"aa": files["mono_aa"], "bb": files["mono_bb"]},
                     "parallel_split": [200, 30, 30], "mono_split": [150, 0, 0]},
            "model": {},   # desk defaults: d_model 64, 4 heads, 4+4 layers, d_ff 256
            "train": {"steps": 300, "batch_size": 16, "log_interval": 50},
            "optimizer": {"lr": 3e-4},
            "decode": {"beam_size": 2, "length_penalty": 1.2, "max_decode_len": 24},
        }
    elif name == "paper-faithful":
        payload = {
            "seed": seed,
            "out_dir": out_dir,
            "data": {"src_lang": "mr", "tgt_lang": "hi",
                     "parallel_src_file": "", "parallel_tgt_file": "", "mono_files": {},
                     "parallel_split": [100_000, 20_000, 5_000],
                     "mono_split": [70_000, 0, 0]},
            "model": {"d_model": 1024, "n_heads": 16, "n_enc_layers": 12, "n_dec_layers": 12,
                      "d_ff": 4096, "max_len": 256},
            "train": {"steps": None, "epochs": 1, "batch_size": 16, "mtl_batch_size": 2,
                      "log_interval": 500},
            "optimizer": {"lr": PAPER_LR},
            "decode": {"beam_size": 2, "length_penalty": 1.2, "max_decode_len": 128},
        }
    else:
        raise ConfigError(f"unknown preset {name!r}; choose smoke, desk or paper-faithful")
    return config_from_dict(payload)


def run_experiment(config: ExperimentConfig) -> ComparisonReport:
    return ExperimentRunner(config).run()
