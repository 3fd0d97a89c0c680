"""
tagtriplet CLI - Command Line Interface
Pipeline subcommands: ingest, fit-lsi, topics, extract-features, train, embed,
eval, sweep and synth. Every run writes a manifest next to its artifacts.
"""

import argparse
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .artifacts import RunOutputs, sha256_file, sha256_text, write_manifest
from .audiofeat import (
    extract_track,
    feature_filename,
    read_feature_manifest,
    read_wav_manifest,
    write_feature_manifest,
    write_features,
)
from .cache_manager import SweepCache
from .config import PipelineConfig, TAG_SETS, split_list
from .errors import ConfigError, DataError, DurationError, TagTripletError
from .evaluation import (
    EvaluationReport,
    best_rows,
    evaluate,
    format_report,
    parse_combos,
    read_embeddings,
    read_split,
    report_tsv,
    stratified_split,
    sweep,
    sweep_cells,
    write_embeddings,
    write_split,
)
from .lsi import (
    fit_lsi,
    format_topic_report,
    normalized_track_matrix,
    overlap_vectors,
    read_model,
    read_model_shape,
    topic_top_terms,
    write_model,
)
from .mining import write_triplet_dump_header
from .pipeline import SweepContext, Workspace, embed_tracks, run_sweep_cell, train_on_split
from .synth import SynthSpec, generate, write_synth
from .tagspace import (
    TagCorpus,
    build_matrix,
    corpus_stats,
    format_stats,
    intersect_tagsets,
    parse_tag_file,
    restrict_tagsets,
    stats_tsv,
    write_corpus,
)
from .trainer import load_checkpoint, save_checkpoint, write_loss_history

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# subcommand flag -> config key
FLAG_KEYS = {
    "k": "lsi.k",
    "epochs": "trainer.epochs",
    "batch_size": "mining.batch_size",
    "strategy": "mining.strategy",
    "margin": "trainer.margin",
    "encoder": "trainer.encoder",
    "dim": "trainer.dim",
    "learning_rate": "trainer.learning_rate",
    "seed": "trainer.seed",
    "relatedness": "mining.relatedness",
    "eval_k": "eval.k",
    "metric": "eval.metric",
    "fractions": "eval.fractions",
    "tag_sets": "tags.tag_sets",
    "require": "tags.required",
    "workers": "sweep.workers",
    "combos": "sweep.combos",
    "synth_seed": "synth.seed",
    "clusters": "synth.n_clusters",
    "tracks_per_cluster": "synth.tracks_per_cluster",
    "noise": "synth.noise_sigma",
    "log_level": "log.level",
}


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    """`section.key=value` strings from --set"""
    overrides = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


class TagTripletCLI:
    """tagtriplet command line interface"""

    def __init__(self):
        self.config: Optional[PipelineConfig] = None
        self.outputs: Optional[RunOutputs] = None
        self.inputs: Dict[str, Path] = {}

    # --- shared plumbing ---

    @property
    def out_dir(self) -> Path:
        return Path(self.config.paths.output_dir).expanduser()

    def _setup_logging(self):
        handlers = [logging.StreamHandler(sys.stderr)]
        if self.config.log.file:
            log_path = self.out_dir / self.config.log.file
            log_path.parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(log_path))
        logging.basicConfig(
            level=getattr(logging, self.config.log.level),
            format=LOG_FORMAT,
            handlers=handlers,
            force=True,
        )

    def _load_config(self, args) -> PipelineConfig:
        overrides = parse_overrides(args.set)
        if args.out:
            overrides["paths.output_dir"] = args.out
        for flag, key in FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = str(value)
        return PipelineConfig.load(args.config, overrides)

    def _input(self, name: str, path: Path) -> Path:
        if not path.exists():
            raise DataError(f"{name} not found: {path}")
        self.inputs[name] = path
        return path

    def _load_corpus(self) -> Tuple[TagCorpus, Path]:
        """The ingested corpus when present, otherwise the raw tags file intersected on the fly"""
        paths = self.config.paths
        corpus_path = paths.resolve("corpus_file")
        if corpus_path.exists():
            return parse_tag_file(self._input("corpus", corpus_path)), corpus_path
        tags_path = self._input("tags", paths.resolve("tags_file"))
        logger.info(f"No ingested corpus at {corpus_path}; using {tags_path}")
        corpus = restrict_tagsets(parse_tag_file(tags_path), self.config.tags.tag_set_list)
        if self.config.tags.required_list:
            corpus = intersect_tagsets(corpus, self.config.tags.required_list)
        return corpus, tags_path

    def _load_split(self, corpus: TagCorpus):
        split_path = self.config.paths.resolve("split_file")
        if split_path.exists():
            return read_split(self._input("split", split_path)), split_path
        ev = self.config.eval
        split = stratified_split(corpus, ev.fraction_values, ev.split_seed)
        write_split(split, self.outputs.path(split_path))
        print(f"📂 Split written: {split_path} "
              f"(train {len(split.train)}, validation {len(split.validation)}, test {len(split.test)})")
        return split, split_path

    def _workspace(self) -> Workspace:
        corpus, _ = self._load_corpus()
        split, _ = self._load_split(corpus)
        manifest_path = self._input("features_manifest", self.config.paths.resolve("features_manifest"))
        return Workspace(corpus=corpus, split=split, manifest=read_feature_manifest(manifest_path))

    def _finish(self, command: str, seed: int):
        manifest = self.outputs.path(self.out_dir / f"{command}.manifest")
        write_manifest(manifest, command, seed, self.config.as_flat(), self.inputs)

    # --- subcommands ---

    def cmd_ingest(self, args):
        """Parse the tags file, intersect over the required tag sets, write the corpus and stats"""
        tags_path = self._input("tags", Path(args.tags) if args.tags else self.config.paths.resolve("tags_file"))
        corpus = restrict_tagsets(parse_tag_file(tags_path), self.config.tags.tag_set_list)
        stages = {"all": corpus_stats(corpus)}
        required = self.config.tags.required_list
        if required:
            corpus = intersect_tagsets(corpus, required)
            stages["intersected"] = corpus_stats(corpus)

        corpus_path = self.outputs.path(self.config.paths.resolve("corpus_file"))
        write_corpus(corpus, corpus_path)
        stats_path = self.outputs.path(self.out_dir / "stats.tsv")
        stats_path.write_text(stats_tsv(stages), encoding="utf-8")

        print(format_stats(stages["all"], title="All tracks"))
        if "intersected" in stages:
            print(format_stats(stages["intersected"], title=f"Tracks with {', '.join(required)}"))
        print(f"✅ Corpus: {len(corpus)} tracks, {len(corpus.tags)} tags -> {corpus_path}")
        self._finish("ingest", 0)
        return 0

    def cmd_fit_lsi(self, args):
        """Fit the LSI model over the configured tag sets"""
        corpus, _ = self._load_corpus()
        W = build_matrix(corpus, self.config.tags.tag_set_list)
        lsi = self.config.lsi
        model = fit_lsi(W, lsi.k, tol=lsi.tol, max_iter=lsi.max_iter, dense_limit=lsi.dense_limit)
        model_path = self.outputs.path(self.config.paths.resolve("lsi_model"))
        write_model(model, model_path)
        top = ", ".join(f"{s:.4g}" for s in model.singular_values[:5])
        print(f"✅ LSI model: {W.m} tags x {W.n} tracks, k={model.k} -> {model_path}")
        print(f"   Leading singular values: {top}")
        self._finish("fit-lsi", 0)
        return 0

    def cmd_topics(self, args):
        """Print the strongest positive and negative tag loadings per topic"""
        model = read_model(self._input("lsi_model", self.config.paths.resolve("lsi_model")))
        ordinals = args.ordinal if args.ordinal else list(range(model.k))
        reports = [topic_top_terms(model, o, args.top_n) for o in ordinals]
        text = format_topic_report(reports)
        topics_path = self.outputs.path(self.out_dir / "topics.txt")
        topics_path.write_text(text, encoding="utf-8")
        print(text.split("\n", 1)[1], end="")
        self._finish("topics", 0)
        return 0

    def cmd_extract_features(self, args):
        """WAV files -> per-track feature files plus a feature manifest"""
        wav_manifest = self._input("wav_manifest", Path(args.wavs) if args.wavs
                                   else self.config.paths.resolve("wav_manifest"))
        audio = self.config.audio
        params = {"sample_rate": audio.sample_rate, "offset": audio.offset, "duration": audio.duration,
                  "n_fft": audio.n_fft, "hop": audio.hop, "n_mels": audio.n_mels,
                  "f_min": audio.f_min, "f_max": audio.f_max}
        entries, skipped = [], 0
        for track_id, wav in read_wav_manifest(wav_manifest):
            try:
                values, _ = extract_track(wav, audio)
            except DurationError as e:
                if args.strict:
                    raise
                skipped += 1
                logger.warning(f"Skipping {track_id}: {e}")
                continue
            rel = f"features/{feature_filename(track_id)}"
            write_features(self.outputs.path(self.out_dir / rel), track_id, values, audio.feature_mode, params)
            entries.append((track_id, rel))
        if not entries:
            raise DataError("no track produced features")
        manifest_path = self.outputs.path(self.config.paths.resolve("features_manifest"))
        write_feature_manifest(manifest_path, entries)
        print(f"✅ Features: {len(entries)} tracks ({audio.feature_mode}) -> {manifest_path}")
        if skipped:
            print(f"⚠️  {skipped} tracks skipped (too short)")
        self._finish("extract-features", 0)
        return 0

    def cmd_train(self, args):
        """Train the encoder on the train split with online triplet mining"""
        cfg = self.config
        ws = self._workspace()
        train_ids = ws.ids("train")
        val_ids = ws.ids("validation")
        if cfg.mining.relatedness == "lsi":
            model = read_model(self._input("lsi_model", cfg.paths.resolve("lsi_model")))
            known = set(model.track_index)
            train_ids = [t for t in train_ids if t in known]
            val_ids = [t for t in val_ids if t in known]
            relatedness = normalized_track_matrix(model, train_ids)
            val_rel = normalized_track_matrix(model, val_ids) if val_ids else None
        else:
            W = build_matrix(ws.corpus, cfg.tags.tag_set_list)
            known = set(W.tracks)
            train_ids = [t for t in train_ids if t in known]
            val_ids = [t for t in val_ids if t in known]
            relatedness = overlap_vectors(W, train_ids)
            val_rel = overlap_vectors(W, val_ids) if val_ids else None
        validation = (val_ids, val_rel) if val_ids else None

        dump = None
        if cfg.trainer.dump_triplets:
            dump = open(self.outputs.path(self.out_dir / "triplets.tsv"), "w", encoding="utf-8", newline="\n")
            write_triplet_dump_header(dump)
        try:
            result = train_on_split(ws, train_ids, relatedness, cfg, dump, validation=validation)
        finally:
            if dump is not None:
                dump.close()

        ckpt_path = self.outputs.path(cfg.paths.resolve("checkpoint"))
        save_checkpoint(result.model, ckpt_path, cfg.trainer.margin, cfg.trainer.seed, cfg.trainer.epochs)
        history_path = self.outputs.path(cfg.paths.resolve("loss_history"))
        write_loss_history(result.history, history_path)
        first, last = result.history[0], result.history[-1]
        print(f"✅ Trained {result.model!r} on {len(train_ids)} tracks")
        print(f"   Loss: epoch 1 {first.mean_loss:.6f} -> epoch {last.epoch} {last.mean_loss:.6f}")
        if last.validation_loss is not None:
            print(f"   Validation loss: {last.validation_loss:.6f} ({len(val_ids)} tracks)")
        print(f"   Checkpoint: {ckpt_path}")
        self._finish("train", cfg.trainer.seed)
        return 0

    def cmd_embed(self, args):
        """Embed the tracks of one split (or all) with a trained checkpoint"""
        ckpt = load_checkpoint(self._input("checkpoint", self.config.paths.resolve("checkpoint")))
        ws = self._workspace()
        if args.part == "all":
            track_ids = sorted(t for t in ws.corpus.tracks if t in ws.manifest)
        else:
            track_ids = ws.ids(args.part)
        table = embed_tracks(ckpt.model, ws, track_ids)
        emb_path = self.outputs.path(self.config.paths.resolve("embeddings"))
        write_embeddings(table, emb_path)
        print(f"✅ Embedded {len(track_ids)} tracks ({args.part}) -> {emb_path}")
        self._finish("embed", ckpt.seed)
        return 0

    def cmd_eval(self, args):
        """precision@k of the test split for every task, as one report row"""
        cfg = self.config
        ws = self._workspace()
        test_ids = ws.ids("test")
        if args.embeddings:
            table = read_embeddings(self._input("embeddings", Path(args.embeddings))).subset(test_ids)
            seed = 0
        else:
            ckpt = load_checkpoint(self._input("checkpoint", cfg.paths.resolve("checkpoint")))
            table = embed_tracks(ckpt.model, ws, test_ids)
            seed = ckpt.seed
        topics = cfg.lsi.k
        model_path = cfg.paths.resolve("lsi_model")
        if cfg.mining.relatedness == "lsi" and model_path.exists():
            topics = read_model_shape(model_path)[2]
        elif cfg.mining.relatedness == "overlap":
            topics = 0
        row = evaluate(table, ws.corpus, test_ids, k=cfg.eval.k, tasks=cfg.eval.task_list,
                       metric=cfg.eval.metric, tag_set_label="+".join(cfg.tags.tag_set_list),
                       lsi_topics=topics)
        report = EvaluationReport(rows=[row], k=cfg.eval.k)
        self.outputs.path(self.out_dir / "report.tsv").write_text(report_tsv(report), encoding="utf-8")
        text = format_report(report)
        self.outputs.path(self.out_dir / "report.txt").write_text(text, encoding="utf-8")
        print(text, end="")
        self._finish("eval", seed)
        return 0

    def _cache_key_fn(self, corpus_path: Path, manifest_path: Path, split_path: Path, manifest):
        config_subset = {
            key: value for key, value in self.config.as_flat(["tags", "lsi", "mining", "trainer", "eval"]).items()
            if key not in ("lsi.k", "lsi.grid_start", "lsi.grid_stop", "lsi.grid_step")
        }
        feature_digest = sha256_text("\n".join(
            f"{t}\t{sha256_file(p)}" for t, p in sorted(manifest.items())
        ))
        inputs = {
            "corpus": sha256_file(corpus_path),
            "features_manifest": sha256_file(manifest_path),
            "features": feature_digest,
            "split": sha256_file(split_path),
        }

        def cache_key(cell) -> str:
            return sha256_text(json.dumps(
                {"cell": [cell.label, cell.lsi_topics], "config": config_subset, "inputs": inputs},
                sort_keys=True,
            ))
        return cache_key

    def cmd_sweep(self, args):
        """Every tag_set combination x topic count, one report row each"""
        cfg = self.config
        corpus, corpus_path = self._load_corpus()
        if corpus_path != cfg.paths.resolve("corpus_file"):
            corpus_path = self.outputs.path(cfg.paths.resolve("corpus_file"))
            write_corpus(corpus, corpus_path)
        _, split_path = self._load_split(corpus)
        manifest_path = self._input("features_manifest", cfg.paths.resolve("features_manifest"))
        manifest = read_feature_manifest(manifest_path)

        combos = parse_combos(cfg.sweep.combos, [ts for ts in TAG_SETS if ts in cfg.tags.tag_set_list])
        grid = [int(k) for k in split_list(args.grid)] if args.grid else cfg.lsi.grid
        cells = sweep_cells(combos, grid)
        ctx = SweepContext(
            config_flat=tuple(sorted(cfg.as_flat().items())),
            corpus_file=str(corpus_path),
            features_manifest=str(manifest_path),
            split_file=str(split_path),
        )
        cache = None
        cache_key = None
        if not args.no_cache:
            cache_path = Path(cfg.sweep.cache_file).expanduser()
            cache = SweepCache(cache_path if cache_path.is_absolute() else self.out_dir / cache_path)
            cache_key = self._cache_key_fn(corpus_path, manifest_path, split_path, manifest)
        print(f"🔁 Sweep: {len(combos)} combinations x {len(grid)} topic counts = {len(cells)} cells")
        try:
            report = sweep(cells, functools.partial(run_sweep_cell, ctx), k=cfg.eval.k,
                           cache=cache, cache_key=cache_key, workers=cfg.sweep.workers)
        finally:
            if cache is not None:
                cache.close()

        self.outputs.path(self.out_dir / "sweep_report.tsv").write_text(report_tsv(report), encoding="utf-8")
        text = format_report(report)
        self.outputs.path(self.out_dir / "sweep_report.txt").write_text(text, encoding="utf-8")
        print(text, end="")
        best = best_rows(report)
        if best:
            print("📊 Best topic count per combination:")
            for row in best:
                print(f"   {row.tag_set}: {row.lsi_topics}")
        if report.failures:
            print(f"⚠️  {len(report.failures)} of {len(cells)} cells failed")
        self._finish("sweep", cfg.trainer.seed)
        return 0

    def cmd_synth(self, args):
        """Generate a synthetic corpus with planted clusters in the real input formats"""
        cfg = self.config
        spec = SynthSpec.from_config(cfg.synth)
        data = generate(spec)
        written = write_synth(
            data,
            self.out_dir,
            tags_file=str(cfg.paths.resolve("tags_file")),
            manifest_file=str(cfg.paths.resolve("features_manifest")),
            seed=spec.seed,
        )
        for path in written:
            self.outputs.path(path)
        print(f"✅ Synthetic corpus: {spec.n_clusters} clusters x {spec.tracks_per_cluster} tracks, "
              f"{len(data.corpus.tags)} tags, f={spec.feature_dim} -> {self.out_dir}")
        self._finish("synth", spec.seed)
        return 0

    # --- entry point ---

    def build_parser(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", help="Flat section.key = value config file (a run manifest works too)")
        common.add_argument("--out", help="Output directory (paths.output_dir)")
        common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key")
        common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ...")

        parser = argparse.ArgumentParser(
            prog="tagtriplet",
            description="tagtriplet - tag-relatedness triplet training for music audio embeddings",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  tagtriplet synth --out run1              # Synthetic tags + features
  tagtriplet fit-lsi --out run1 --k 20     # LSI over the tag sets
  tagtriplet train --out run1 --epochs 30  # Triplet training
  tagtriplet eval --out run1 --eval-k 10   # precision@k report
  tagtriplet sweep --out run1 --grid 10,20 # Combinations x topic counts
            """
        )
        subparsers = parser.add_subparsers(dest="command", help="Available commands")

        ingest = subparsers.add_parser("ingest", parents=[common], help="Parse tags, intersect tag sets, report stats")
        ingest.add_argument("--tags", help="Tags TSV (default paths.tags_file)")
        ingest.add_argument("--tag-sets", dest="tag_sets", help="Comma separated tag sets to keep")
        ingest.add_argument("--require", help="Comma separated tag sets every track must have")

        fit = subparsers.add_parser("fit-lsi", parents=[common], help="Fit the LSI model")
        fit.add_argument("--k", type=int, help="Number of topics")
        fit.add_argument("--tag-sets", dest="tag_sets", help="Comma separated tag sets forming the matrix")

        topics = subparsers.add_parser("topics", parents=[common], help="Show topic loadings")
        topics.add_argument("--ordinal", type=int, action="append", help="Topic ordinal (repeatable)")
        topics.add_argument("--top-n", dest="top_n", type=int, default=10, help="Loadings per side")

        feats = subparsers.add_parser("extract-features", parents=[common], help="Audio features from WAV files")
        feats.add_argument("--wavs", help="TSV of track_id, wav path (default paths.wav_manifest)")
        feats.add_argument("--strict", action="store_true", help="Fail on clips that are too short")

        train = subparsers.add_parser("train", parents=[common], help="Train the encoder")
        train.add_argument("--epochs", type=int)
        train.add_argument("--batch-size", dest="batch_size", type=int)
        train.add_argument("--strategy", choices=["paper-literal", "batch-hard", "random"])
        train.add_argument("--margin", type=float)
        train.add_argument("--encoder", choices=["identity", "linear", "mlp"])
        train.add_argument("--dim", type=int)
        train.add_argument("--learning-rate", dest="learning_rate", type=float)
        train.add_argument("--seed", type=int)
        train.add_argument("--relatedness", choices=["lsi", "overlap"])

        emb = subparsers.add_parser("embed", parents=[common], help="Embed tracks with a checkpoint")
        emb.add_argument("--part", choices=["train", "validation", "test", "all"], default="all")

        ev = subparsers.add_parser("eval", parents=[common], help="Evaluate retrieval precision@k")
        ev.add_argument("--embeddings", help="Embeddings TSV (default: embed the test split from the checkpoint)")
        ev.add_argument("--eval-k", dest="eval_k", type=int, help="Retrieval cut-off")
        ev.add_argument("--metric", choices=["euclidean", "cosine"])

        sw = subparsers.add_parser("sweep", parents=[common], help="Tag-set combination x topic-count sweep")
        sw.add_argument("--grid", help="Comma separated topic counts (default: lsi grid)")
        sw.add_argument("--combos", help="`all` or comma separated '+'-joined tag sets")
        sw.add_argument("--workers", type=int)
        sw.add_argument("--eval-k", dest="eval_k", type=int)
        sw.add_argument("--epochs", type=int)
        sw.add_argument("--batch-size", dest="batch_size", type=int)
        sw.add_argument("--no-cache", dest="no_cache", action="store_true", help="Ignore and skip the row cache")

        syn = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic corpus")
        syn.add_argument("--synth-seed", dest="synth_seed", type=int)
        syn.add_argument("--clusters", type=int)
        syn.add_argument("--tracks-per-cluster", dest="tracks_per_cluster", type=int)
        syn.add_argument("--noise", type=float)
        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Main CLI entry point; returns the process exit code"""
        parser = self.build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return 0 if e.code in (0, None) else 1

        if not args.command:
            parser.print_help()
            return 0

        command_map = {
            "ingest": self.cmd_ingest,
            "fit-lsi": self.cmd_fit_lsi,
            "topics": self.cmd_topics,
            "extract-features": self.cmd_extract_features,
            "train": self.cmd_train,
            "embed": self.cmd_embed,
            "eval": self.cmd_eval,
            "sweep": self.cmd_sweep,
            "synth": self.cmd_synth,
        }

        try:
            self.config = self._load_config(args)
        except TagTripletError as e:
            print(f"❌ {e}", file=sys.stderr)
            return e.exit_code
        self._setup_logging()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs = RunOutputs(self.out_dir)
        self.inputs = {}

        try:
            return command_map[args.command](args)
        except TagTripletError as e:
            logger.debug(f"{args.command} failed", exc_info=True)
            logger.error(f"{args.command} failed: {e}")
            print(f"❌ {e}", file=sys.stderr)
            self.outputs.discard()
            return e.exit_code
        except Exception as e:
            logger.exception(f"{args.command} crashed: {e}")
            print(f"❌ Unexpected error: {e}", file=sys.stderr)
            self.outputs.discard()
            return 3


def main():
    cli = TagTripletCLI()
    sys.exit(cli.run())


if __name__ == "__main__":
    main()
