#include "stemjepa/commands.h"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "stemjepa/analysis.h"
#include "stemjepa/error.h"
#include "stemjepa/retrieval.h"
#include "stemjepa/training.h"

namespace stemjepa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
}

bool non_empty_dir(const fs::path& dir) {
    std::error_code ec;
    return fs::is_directory(dir, ec) && !fs::is_empty(dir, ec);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

fs::path command_dir(const CommandOptions& opts, const RunConfig& cfg, const std::string& command) {
    if (!opts.out.empty()) return opts.out;
    return fs::path(cfg.output_dir) / command;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

struct NullBuffer : std::streambuf {
    int overflow(int c) override { return c; }
};

std::ostream& info(const CommandOptions& opts) {
    static NullBuffer null_buffer;
    static std::ostream null_stream(&null_buffer);
    return opts.quiet ? null_stream : std::cout;
}

// Model and frontend sections must agree between the run config and a checkpoint.
void check_checkpoint_compatible(const RunConfig& cfg, const json& snapshot, const std::string& path) {
    const json mine = to_json(cfg);
    const RunConfig theirs_cfg = run_config_from_json(snapshot);
    const json theirs = to_json(theirs_cfg);
    for (const char* section : {"model", "frontend"}) {
        if (mine.at(section) != theirs.at(section)) {
            throw ConfigError(std::string("checkpoint ") + path + " is incompatible with the run config: " + section +
                              " differs (checkpoint " + theirs.at(section).dump() + ", config " +
                              mine.at(section).dump() + ")");
        }
    }
}

struct LoadedModel {
    RunConfig cfg;
    ModelState state;
};

LoadedModel load_for_eval(const CommandOptions& opts) {
    if (opts.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    Checkpoint ckpt = load_checkpoint(opts.checkpoint);
    LoadedModel out{resolve_command_config(opts, &ckpt.snapshot), std::move(ckpt.state)};
    check_checkpoint_compatible(out.cfg, ckpt.snapshot, opts.checkpoint);
    return out;
}

EmbedOptions embed_options(const RunConfig& cfg) {
    EmbedOptions e;
    e.frontend = cfg.frontend;
    e.pooling = cfg.eval.pooling;
    e.metric = metric_from_string(cfg.eval.metric);
    e.activity = cfg.data.activity;
    e.threads = cfg.threads;
    return e;
}

fs::path default_corpus_file(const RunConfig& cfg, const std::string& configured, const char* fallback) {
    if (!configured.empty()) return configured;
    if (cfg.data.manifest.empty()) throw ConfigError(std::string("no input file configured and no corpus to look in"));
    return fs::path(cfg.data.manifest).parent_path() / fallback;
}

}  // namespace

RunConfig resolve_command_config(const CommandOptions& opts, const json* snapshot) {
    json doc = json::object();
    if (!opts.config_path.empty()) {
        doc = read_json_file(opts.config_path);
    } else if (snapshot) {
        doc = *snapshot;
    }
    apply_overrides(doc, opts.overrides);
    if (!opts.out.empty()) doc["output_dir"] = opts.out;
    RunConfig cfg = run_config_from_json(doc);
    cfg.resolve();
    return cfg;
}

Corpus open_corpus(const RunConfig& cfg) {
    if (!cfg.data.manifest.empty()) {
        if (!fs::exists(cfg.data.manifest)) throw IoError("corpus manifest not found: " + cfg.data.manifest);
        return Corpus::load(cfg.data.manifest);
    }
    if (!cfg.data.musdb_root.empty()) {
        fs::path cache;
        if (const char* env = std::getenv("STEMJEPA_CACHE_DIR"); env && *env) {
            cache = env;
        } else if (const char* home = std::getenv("HOME"); home && *home) {
            cache = fs::path(home) / ".cache" / "stemjepa";
        } else {
            cache = ".stemjepa_cache";
        }
        cache /= "musdb_" + std::to_string(cfg.frontend.sample_rate);
        const fs::path manifest = cache / "manifest.json";
        if (fs::exists(manifest)) return Corpus::load(manifest);
        return Corpus::load(import_musdb(cfg.data.musdb_root, cache, cfg.frontend.sample_rate));
    }
    throw ConfigError("set data.manifest or data.musdb_root");
}

std::vector<std::size_t> eval_tracks(const Corpus& corpus, const RunConfig& cfg) {
    const auto [train, holdout] = corpus.split(cfg.data.holdout_tracks);
    if (cfg.eval.split == "train") return train;
    if (cfg.eval.split == "all") {
        std::vector<std::size_t> all(corpus.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    if (holdout.empty()) throw ConfigError("eval.split is 'holdout' but data.holdout_tracks is 0");
    return holdout;
}

void write_config_snapshot(const fs::path& dir, const RunConfig& cfg) {
    ensure_dir(dir);
    write_json(dir / "config.json", to_json(cfg));
}

// ---------------------------------------------------------------------------

fs::path cmd_synth(const CommandOptions& opts) {
    const RunConfig cfg = resolve_command_config(opts);
    cfg.data.synth.validate();
    const fs::path out = opts.out.empty() ? fs::path(cfg.output_dir) : fs::path(opts.out);
    if (non_empty_dir(out) && !opts.force) {
        throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
    }
    ensure_dir(out);
    const fs::path manifest = generate_synthetic_corpus(cfg.data.synth, cfg.seed, out);
    write_config_snapshot(out, cfg);
    const Corpus corpus = Corpus::load(manifest);
    std::set<std::string> keys;
    for (const auto& t : corpus.tracks()) {
        if (auto it = t.metadata.find("key"); it != t.metadata.end()) keys.insert(it->second);
    }
    auto& os = info(opts);
    os << "wrote " << corpus.size() << " tracks x " << corpus.labels().size() << " stems, " << cfg.data.synth.duration
       << " s each, to " << out.string() << "\nkeys:";
    for (const auto& k : keys) os << ' ' << k;
    os << "\nmanifest: " << manifest.string() << '\n';
    return manifest;
}

fs::path cmd_train(const CommandOptions& opts) {
    const RunConfig cfg = resolve_command_config(opts);
    const fs::path out = opts.out.empty() ? fs::path(cfg.output_dir) : fs::path(opts.out);
    const fs::path last = out / "last.ckpt";
    if (!opts.resume && non_empty_dir(out) && !opts.force) {
        throw ConfigError("output directory " + out.string() + " is not empty (use --resume or --force)");
    }
    const Corpus corpus = open_corpus(cfg);
    if (corpus.sample_rate() != cfg.frontend.sample_rate) {
        throw ConfigError("corpus sample rate " + std::to_string(corpus.sample_rate()) +
                          " differs from frontend.sample_rate " + std::to_string(cfg.frontend.sample_rate));
    }
    const auto [train_idx, holdout_idx] = corpus.split(cfg.data.holdout_tracks);
    if (train_idx.empty()) throw InputError("no training tracks left after the holdout split");
    ensure_dir(out / "checkpoints");

    const json snapshot = to_json(cfg);
    Trainer trainer(ModelState(cfg.model, cfg.seed), cfg.train, cfg.frontend);
    if (opts.resume) {
        const fs::path src = opts.checkpoint.empty() ? last : fs::path(opts.checkpoint);
        const Checkpoint ckpt = load_checkpoint(src);
        json mine = snapshot, theirs = to_json(run_config_from_json(ckpt.snapshot));
        for (auto* j : {&mine, &theirs}) {
            j->erase("output_dir");
            j->erase("threads");
        }
        if (mine != theirs) {
            throw ConfigError("cannot resume from " + src.string() + ": its configuration differs from this run");
        }
        restore_trainer(trainer, ckpt);
    }
    write_config_snapshot(out, cfg);
    auto& os = info(opts);
    const std::int64_t start = trainer.state().step;
    if (start >= cfg.train.total_steps) {
        os << "nothing to do: checkpoint is at step " << start << " of " << cfg.train.total_steps << '\n';
        return last;
    }

    // Keep only log lines from steps before the resume point.
    std::vector<std::string> kept[2];
    const fs::path log_paths[2] = {out / "log.jsonl", out / "timing.jsonl"};
    if (opts.resume) {
        for (int f = 0; f < 2; ++f) {
            std::ifstream in(log_paths[f]);
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (json::parse(line).at("step").get<std::int64_t>() < start) kept[f].push_back(line);
            }
        }
    }
    std::ofstream log(log_paths[0], std::ios::trunc), timing(log_paths[1], std::ios::trunc);
    if (!log || !timing) throw IoError("cannot write logs in " + out.string());
    for (const auto& l : kept[0]) log << l << '\n';
    for (const auto& l : kept[1]) timing << l << '\n';

    const PairSamplerConfig sampler = cfg.sampler();
    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t step = start; step < cfg.train.total_steps; ++step) {
        const auto ts = std::chrono::steady_clock::now();
        std::vector<std::string> skipped;
        const PairBatch batch = trainer.sample_batch(corpus, train_idx, step, sampler, &skipped);
        const TrainLogRecord rec = trainer.train_step(batch);
        json line = {{"step", rec.step},           {"loss", rec.loss},          {"tau", rec.tau},
                     {"lr", rec.lr},               {"embedding_std", rec.embedding_std},
                     {"grad_norm", rec.grad_norm}};
        if (!skipped.empty()) line["skipped"] = skipped;
        log << line.dump() << '\n';
        const double step_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count();
        timing << json{{"step", rec.step}, {"step_seconds", step_time}, {"model_seconds", rec.wall_time}}.dump()
               << '\n';
        if (rec.embedding_std < cfg.train.collapse_threshold) {
            log.flush();
            save_checkpoint(out / "collapsed.ckpt", trainer, snapshot);
            throw NumericalError("representation collapse at step " + std::to_string(rec.step) +
                                 ": embedding std " + std::to_string(rec.embedding_std) + " < " +
                                 std::to_string(cfg.train.collapse_threshold));
        }
        const std::int64_t done = step + 1;
        if (done % cfg.train.checkpoint_every == 0 || done == cfg.train.total_steps) {
            log.flush();
            timing.flush();
            save_checkpoint(out / "checkpoints" / ("step_" + std::to_string(done) + ".ckpt"), trainer, snapshot);
            save_checkpoint(last, trainer, snapshot);
        }
        if (done % 50 == 0 || done == cfg.train.total_steps) {
            const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            os << "step " << done << "/" << cfg.train.total_steps << " loss " << rec.loss << " std "
               << rec.embedding_std << " lr " << rec.lr << " (" << el << " s)\n"
               << std::flush;
        }
    }
    return last;
}

fs::path cmd_embed(const CommandOptions& opts) {
    const LoadedModel m = load_for_eval(opts);
    const fs::path out = command_dir(opts, m.cfg, "embed");
    const Corpus corpus = open_corpus(m.cfg);
    const auto tracks = eval_tracks(corpus, m.cfg);
    const EmbedOptions eo = embed_options(m.cfg);
    const RetrievalIndex index = build_reference_set(corpus, tracks, m.state, eo);
    const auto queries = build_queries(corpus, tracks, m.state, eo);
    write_config_snapshot(out, m.cfg);
    write_embedding_store(out / "references", index.entries(), index.dim(), eo.pooling, eo.metric);
    write_embedding_store(out / "queries", queries, index.dim(), eo.pooling, eo.metric);
    info(opts) << "embedded " << index.size() << " references and " << queries.size() << " queries (dim "
               << index.dim() << ") to " << out.string() << '\n';
    return out;
}

fs::path cmd_retrieve(const CommandOptions& opts) {
    RunConfig cfg;
    RetrievalIndex index;
    std::vector<PooledEmbedding> queries;
    if (!opts.embeddings.empty()) {
        const fs::path dir = opts.embeddings;
        json snap;
        const bool has_snap = fs::exists(dir / "config.json");
        if (has_snap) snap = read_json_file(dir / "config.json");
        cfg = resolve_command_config(opts, has_snap ? &snap : nullptr);
        index = index_from_store(read_embedding_store(dir / "references"));
        EmbeddingStore qs = read_embedding_store(dir / "queries");
        check_compatible(qs, index);
        queries = std::move(qs.entries);
    } else {
        const LoadedModel m = load_for_eval(opts);
        cfg = m.cfg;
        const Corpus corpus = open_corpus(cfg);
        const auto tracks = eval_tracks(corpus, cfg);
        const EmbedOptions eo = embed_options(cfg);
        index = build_reference_set(corpus, tracks, m.state, eo);
        queries = build_queries(corpus, tracks, m.state, eo);
    }
    const fs::path out = command_dir(opts, cfg, "retrieve");
    const RetrievalMetrics metrics = evaluate_retrieval(queries, index, cfg.eval.recall_ks);
    write_config_snapshot(out, cfg);
    json report = to_json(metrics);
    report["pooling"] = to_string(index.pooling());
    report["metric"] = to_string(index.metric());
    report["chance"] = json::object();
    for (int k : cfg.eval.recall_ks) {
        report["chance"]["R@" + std::to_string(k)] =
            std::min(1.0, static_cast<double>(k) / static_cast<double>(index.size()));
    }
    write_json(out / "metrics.json", report);
    write_query_csv(out / "queries.csv", metrics, index);
    auto& os = info(opts);
    os << metrics.queries << " queries against " << metrics.references << " references:";
    for (const auto& [k, r] : metrics.recall) os << " R@" << k << "=" << r;
    os << " rank mean " << metrics.rank_mean << " median " << metrics.rank_median << '\n';
    return out / "metrics.json";
}

fs::path cmd_align(const CommandOptions& opts) {
    const LoadedModel m = load_for_eval(opts);
    const fs::path out = command_dir(opts, m.cfg, "align");
    const Corpus corpus = open_corpus(m.cfg);
    auto tracks = eval_tracks(corpus, m.cfg);
    if (m.cfg.analysis.align_tracks > 0 && tracks.size() > static_cast<std::size_t>(m.cfg.analysis.align_tracks)) {
        tracks.resize(static_cast<std::size_t>(m.cfg.analysis.align_tracks));
    }
    std::vector<AlignmentCurve> curves(tracks.size());
    parallel_for(tracks.size(), m.cfg.threads, [&](std::size_t i) {
        curves[i] = alignment_curve(corpus.read_full(tracks[i]), m.state, m.cfg.frontend, m.cfg.analysis.max_shift);
    });
    write_config_snapshot(out, m.cfg);
    write_alignment_csv(out / "alignment.csv", curves);
    json summary = json::array();
    std::size_t at_zero = 0;
    for (const auto& c : curves) {
        const int am = c.argmax_offset();
        at_zero += am == 0;
        summary.push_back({{"track", c.track}, {"frames", c.frames}, {"stems", c.stems}, {"argmax_offset", am},
                           {"argmax_seconds", am * c.frame_seconds}});
    }
    const double frac = curves.empty() ? 0.0 : static_cast<double>(at_zero) / static_cast<double>(curves.size());
    write_json(out / "alignment.json", {{"tracks", summary}, {"argmax_at_zero_fraction", frac}});
    info(opts) << curves.size() << " alignment curves; argmax at zero shift for " << at_zero << " of "
               << curves.size() << '\n';
    return out / "alignment.csv";
}

fs::path cmd_cluster(const CommandOptions& opts) {
    const LoadedModel m = load_for_eval(opts);
    const fs::path out = command_dir(opts, m.cfg, "cluster");
    const fs::path seg_path = default_corpus_file(m.cfg, m.cfg.analysis.segments, "annotations.jsonl");
    const auto segments = read_segments(seg_path);
    const LabeledVectors lv = labeled_embeddings(segments, m.state, m.cfg.frontend, m.cfg.analysis.cluster_unit);
    KMeansConfig kc;
    kc.k = m.cfg.analysis.clusters;
    kc.max_iterations = m.cfg.analysis.kmeans_iterations;
    kc.restarts = m.cfg.analysis.kmeans_restarts;
    kc.seed = m.cfg.seed;
    const CooccurrenceMatrix cm = cluster_cooccurrence(lv.points, lv.labels, lv.vocabulary, kc);
    write_config_snapshot(out, m.cfg);
    json j = to_json(cm, m.cfg.analysis.top_n);
    j["vectors"] = lv.points.rows();
    j["unit"] = m.cfg.analysis.cluster_unit;
    j.erase("assignments");
    write_json(out / "cooccurrence.json", j);
    write_cooccurrence_csv(out / "cooccurrence.csv", cm);
    info(opts) << "clustered " << lv.points.rows() << " vectors into " << kc.k << " clusters; " << cm.total()
               << " co-occurring pairs over " << lv.vocabulary.size() << " labels\n";
    return out / "cooccurrence.json";
}

fs::path cmd_probe(const CommandOptions& opts) {
    const LoadedModel m = load_for_eval(opts);
    const fs::path out = command_dir(opts, m.cfg, "probe");
    const fs::path ds_path = default_corpus_file(m.cfg, m.cfg.analysis.probe_dataset, "tasks/key.jsonl");
    std::ifstream in(ds_path);
    if (!in) throw IoError("probe dataset not found: " + ds_path.string());

    struct Row {
        fs::path clip;
        std::vector<std::string> labels;
        int split;
    };
    std::vector<Row> rows;
    bool multilabel = false;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            Row r;
            const fs::path clip = j.at("clip").get<std::string>();
            r.clip = clip.is_absolute() ? clip : ds_path.parent_path() / clip;
            if (j.contains("labels")) {
                multilabel = true;
                r.labels = j.at("labels").get<std::vector<std::string>>();
            } else {
                r.labels = {j.at("label").get<std::string>()};
            }
            const std::string split = j.at("split").get<std::string>();
            r.split = split == "train" ? 0 : split == "valid" ? 1 : split == "test" ? 2 : -1;
            if (r.split < 0) throw InputError("unknown split '" + split + "'");
            rows.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw InputError(ds_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    std::vector<Eigen::VectorXf> emb(rows.size());
    parallel_for(rows.size(), m.cfg.threads, [&](std::size_t i) {
        AudioChunk a = read_wav(rows[i].clip);
        if (a.sample_rate != m.cfg.frontend.sample_rate) a = resample(a, m.cfg.frontend.sample_rate);
        emb[i] = global_embedding(a, m.state, m.cfg.frontend, rows[i].clip.string()).vector;
    });
    std::vector<MatrixF> feats(3);
    std::vector<std::vector<std::vector<std::string>>> labels(3);
    std::vector<std::vector<std::size_t>> members(3);
    for (std::size_t i = 0; i < rows.size(); ++i) members[static_cast<std::size_t>(rows[i].split)].push_back(i);
    for (std::size_t s = 0; s < 3; ++s) {
        feats[s].resize(static_cast<Eigen::Index>(members[s].size()), emb.empty() ? 0 : emb[0].size());
        for (std::size_t r = 0; r < members[s].size(); ++r) {
            feats[s].row(static_cast<Eigen::Index>(r)) = emb[members[s][r]].transpose();
            labels[s].push_back(rows[members[s][r]].labels);
        }
    }
    const ProbeDataset ds = make_probe_dataset(feats, labels, multilabel);
    ProbeOptions po;
    po.hidden = m.cfg.analysis.probe.hidden;
    po.batch_size = m.cfg.analysis.probe.batch_size;
    po.lr = m.cfg.analysis.probe.lr;
    po.weight_decay = m.cfg.analysis.probe.weight_decay;
    po.max_epochs = m.cfg.analysis.probe.max_epochs;
    po.patience = m.cfg.analysis.probe.patience;
    po.standardize = m.cfg.analysis.probe.standardize;
    po.seed = m.cfg.seed;
    const ProbeReport rep = probe_train_eval(ds, po);
    write_config_snapshot(out, m.cfg);
    json j = to_json(rep);
    j["dataset"] = ds_path.string();
    j["classes"] = ds.classes;
    j["embedding_dim"] = feats[0].cols();
    j["counts"] = {{"train", members[0].size()}, {"valid", members[1].size()}, {"test", members[2].size()}};
    write_json(out / "probe.json", j);
    auto& os = info(opts);
    if (rep.multilabel) {
        os << "probe: ROC-AUC " << rep.test_roc_auc << " AP " << rep.test_average_precision << '\n';
    } else {
        os << "probe: test accuracy " << rep.test_accuracy << " over " << ds.classes.size() << " classes\n";
    }
    return out / "probe.json";
}

}  // namespace stemjepa
