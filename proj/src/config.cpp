#include "stemjepa/config.h"

#include <fstream>
#include <sstream>

#include "stemjepa/error.h"
#include "stemjepa/retrieval.h"

namespace stemjepa {

using json = nlohmann::json;

namespace {

// Rejects keys absent from the schema (the serialized defaults).
void check_keys(const json& doc, const json& schema, const std::string& path) {
    if (!doc.is_object()) throw ConfigError("config section '" + path + "' must be an object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string key_path = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + key_path + "'");
        if (schema[it.key()].is_object()) check_keys(it.value(), schema[it.key()], key_path);
    }
}

class Reader {
public:
    Reader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {}

    template <typename T>
    void operator()(const char* key, T& out) const {
        try {
            out = doc_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + path_ + "." + key + "' has the wrong type");
        }
    }

    Reader section(const char* key) const { return Reader(doc_.at(key), path_ + "." + key); }

private:
    const json& doc_;
    std::string path_;
};

json frontend_json(const FrontendConfig& f) {
    return {{"sample_rate", f.sample_rate}, {"n_mels", f.n_mels},         {"window_s", f.window_s},
            {"hop_s", f.hop_s},             {"n_fft", f.n_fft},           {"f_min", f.f_min},
            {"f_max", f.f_max},             {"power_floor", f.power_floor}, {"standardize", f.standardize},
            {"std_floor", f.std_floor},     {"patch_f", f.patch_f},       {"patch_t", f.patch_t},
            {"chunk_duration", f.chunk_duration}};
}

json model_json(const std::string& preset, const ModelConfig& m) {
    const auto& e = m.encoder;
    const auto& p = m.predictor;
    return {{"preset", preset},
            {"labels", m.labels},
            {"encoder",
             {{"depth", e.depth},
              {"width", e.width},
              {"heads", e.heads},
              {"mlp_ratio", e.mlp_ratio},
              {"positional", to_string(e.positional)}}},
            {"predictor",
             {{"kind", to_string(p.kind)},
              {"mlp_layers", p.mlp_layers},
              {"hidden", p.hidden},
              {"label_dim", p.label_dim},
              {"depth", p.depth},
              {"width", p.width},
              {"heads", p.heads},
              {"mlp_ratio", p.mlp_ratio}}}};
}

}  // namespace

ModelConfig model_preset(const std::string& name) {
    ModelConfig m;
    if (name == "tiny") {
        m.encoder = EncoderConfig::tiny();
        m.predictor.hidden = 256;
    } else if (name == "base") {
        m.encoder = EncoderConfig::base();
        m.predictor.hidden = 1024;
    } else {
        throw ConfigError("unknown model preset '" + name + "' (expected tiny|base)");
    }
    return m;
}

void RunConfig::resolve() {
    frontend.validate();
    model.encoder.patch_dim = frontend.patch_f * frontend.patch_t;
    model.encoder.freq_patches = frontend.freq_patches();
    model.encoder.max_time_patches = frontend.time_patches_per_chunk();
    model.validate();
    train.seed = seed;
    train.validate();
    data.synth.sample_rate = frontend.sample_rate;
    if (data.max_resample < 0) throw ConfigError("data.max_resample must be >= 0");
    metric_from_string(eval.metric);
    if (eval.split != "holdout" && eval.split != "train" && eval.split != "all") {
        throw ConfigError("eval.split must be holdout|train|all");
    }
    for (int k : eval.recall_ks) {
        if (k < 1) throw ConfigError("eval.recall_ks entries must be >= 1");
    }
    if (analysis.clusters < 1) throw ConfigError("analysis.clusters must be >= 1");
    if (analysis.cluster_unit != "patch" && analysis.cluster_unit != "frame") {
        throw ConfigError("analysis.cluster_unit must be patch|frame");
    }
    if (analysis.probe.hidden < 1 || analysis.probe.batch_size < 1 || analysis.probe.max_epochs < 1) {
        throw ConfigError("analysis.probe sizes must be positive");
    }
    if (threads < 1) throw ConfigError("threads must be >= 1");
}

PairSamplerConfig RunConfig::sampler() const {
    PairSamplerConfig s;
    s.chunk_duration = frontend.chunk_duration;
    s.activity = data.activity;
    s.max_resample = data.max_resample;
    return s;
}

json to_json(const RunConfig& c) {
    const auto& d = c.data;
    const auto& t = c.train;
    const auto& a = c.analysis;
    return {
        {"frontend", frontend_json(c.frontend)},
        {"data",
         {{"manifest", d.manifest},
          {"musdb_root", d.musdb_root},
          {"holdout_tracks", d.holdout_tracks},
          {"activity_threshold_db", d.activity.threshold_db},
          {"activity_window_s", d.activity.window_s},
          {"activity_hop_s", d.activity.hop_s},
          {"max_resample", d.max_resample},
          {"synth",
           {{"tracks", d.synth.tracks},
            {"duration", d.synth.duration},
            {"tempo_min", d.synth.tempo_min},
            {"tempo_max", d.synth.tempo_max},
            {"keys", d.synth.keys},
            {"write_mixture", d.synth.write_mixture}}}}},
        {"model", model_json(c.model_preset, c.model)},
        {"train",
         {{"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"base_lr", t.base_lr},
          {"warmup_steps", t.warmup_steps},
          {"tau_start", t.tau_start},
          {"tau_end", t.tau_end},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"grad_clip", t.grad_clip},
          {"checkpoint_every", t.checkpoint_every},
          {"collapse_threshold", t.collapse_threshold},
          {"num_workers", t.num_workers}}},
        {"eval",
         {{"pooling", to_string(c.eval.pooling)},
          {"metric", c.eval.metric},
          {"split", c.eval.split},
          {"recall_ks", c.eval.recall_ks}}},
        {"analysis",
         {{"max_shift", a.max_shift},
          {"align_tracks", a.align_tracks},
          {"clusters", a.clusters},
          {"kmeans_iterations", a.kmeans_iterations},
          {"kmeans_restarts", a.kmeans_restarts},
          {"cluster_unit", a.cluster_unit},
          {"segments", a.segments},
          {"top_n", a.top_n},
          {"probe_dataset", a.probe_dataset},
          {"probe",
           {{"hidden", a.probe.hidden},
            {"batch_size", a.probe.batch_size},
            {"lr", a.probe.lr},
            {"weight_decay", a.probe.weight_decay},
            {"max_epochs", a.probe.max_epochs},
            {"patience", a.probe.patience},
            {"standardize", a.probe.standardize}}}}},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"threads", c.threads},
    };
}

RunConfig run_config_from_json(const json& user) {
    if (!user.is_object()) throw ConfigError("config root must be a JSON object");

    RunConfig defaults;
    std::string preset = "tiny";
    if (user.contains("model") && user["model"].is_object() && user["model"].contains("preset")) {
        if (!user["model"]["preset"].is_string()) throw ConfigError("config key 'model.preset' must be a string");
        preset = user["model"]["preset"].get<std::string>();
    }
    defaults.model_preset = preset;
    defaults.model = model_preset(preset);

    const json schema = to_json(defaults);
    check_keys(user, schema, "");
    json doc = schema;
    doc.merge_patch(user);

    RunConfig c = defaults;
    const Reader root(doc, "");

    const Reader f = root.section("frontend");
    f("sample_rate", c.frontend.sample_rate);
    f("n_mels", c.frontend.n_mels);
    f("window_s", c.frontend.window_s);
    f("hop_s", c.frontend.hop_s);
    f("n_fft", c.frontend.n_fft);
    f("f_min", c.frontend.f_min);
    f("f_max", c.frontend.f_max);
    f("power_floor", c.frontend.power_floor);
    f("standardize", c.frontend.standardize);
    f("std_floor", c.frontend.std_floor);
    f("patch_f", c.frontend.patch_f);
    f("patch_t", c.frontend.patch_t);
    f("chunk_duration", c.frontend.chunk_duration);

    const Reader d = root.section("data");
    d("manifest", c.data.manifest);
    d("musdb_root", c.data.musdb_root);
    d("holdout_tracks", c.data.holdout_tracks);
    d("activity_threshold_db", c.data.activity.threshold_db);
    d("activity_window_s", c.data.activity.window_s);
    d("activity_hop_s", c.data.activity.hop_s);
    d("max_resample", c.data.max_resample);
    const Reader s = d.section("synth");
    s("tracks", c.data.synth.tracks);
    s("duration", c.data.synth.duration);
    s("tempo_min", c.data.synth.tempo_min);
    s("tempo_max", c.data.synth.tempo_max);
    s("keys", c.data.synth.keys);
    s("write_mixture", c.data.synth.write_mixture);

    const Reader m = root.section("model");
    m("preset", c.model_preset);
    m("labels", c.model.labels);
    const Reader e = m.section("encoder");
    e("depth", c.model.encoder.depth);
    e("width", c.model.encoder.width);
    e("heads", c.model.encoder.heads);
    e("mlp_ratio", c.model.encoder.mlp_ratio);
    std::string positional;
    e("positional", positional);
    c.model.encoder.positional = positional_encoding_from_string(positional);
    const Reader p = m.section("predictor");
    std::string kind;
    p("kind", kind);
    c.model.predictor.kind = predictor_kind_from_string(kind);
    p("mlp_layers", c.model.predictor.mlp_layers);
    p("hidden", c.model.predictor.hidden);
    p("label_dim", c.model.predictor.label_dim);
    p("depth", c.model.predictor.depth);
    p("width", c.model.predictor.width);
    p("heads", c.model.predictor.heads);
    p("mlp_ratio", c.model.predictor.mlp_ratio);

    const Reader t = root.section("train");
    t("total_steps", c.train.total_steps);
    t("batch_size", c.train.batch_size);
    t("base_lr", c.train.base_lr);
    t("warmup_steps", c.train.warmup_steps);
    t("tau_start", c.train.tau_start);
    t("tau_end", c.train.tau_end);
    t("weight_decay", c.train.weight_decay);
    t("beta1", c.train.beta1);
    t("beta2", c.train.beta2);
    t("adam_eps", c.train.adam_eps);
    t("grad_clip", c.train.grad_clip);
    t("checkpoint_every", c.train.checkpoint_every);
    t("collapse_threshold", c.train.collapse_threshold);
    t("num_workers", c.train.num_workers);

    const Reader ev = root.section("eval");
    std::string pooling;
    ev("pooling", pooling);
    c.eval.pooling = pooling_from_string(pooling);
    ev("metric", c.eval.metric);
    ev("split", c.eval.split);
    ev("recall_ks", c.eval.recall_ks);

    const Reader a = root.section("analysis");
    a("max_shift", c.analysis.max_shift);
    a("align_tracks", c.analysis.align_tracks);
    a("clusters", c.analysis.clusters);
    a("kmeans_iterations", c.analysis.kmeans_iterations);
    a("kmeans_restarts", c.analysis.kmeans_restarts);
    a("cluster_unit", c.analysis.cluster_unit);
    a("segments", c.analysis.segments);
    a("top_n", c.analysis.top_n);
    a("probe_dataset", c.analysis.probe_dataset);
    const Reader pr = a.section("probe");
    pr("hidden", c.analysis.probe.hidden);
    pr("batch_size", c.analysis.probe.batch_size);
    pr("lr", c.analysis.probe.lr);
    pr("weight_decay", c.analysis.probe.weight_decay);
    pr("max_epochs", c.analysis.probe.max_epochs);
    pr("patience", c.analysis.probe.patience);
    pr("standardize", c.analysis.probe.standardize);

    root("seed", c.seed);
    root("output_dir", c.output_dir);
    root("threads", c.threads);

    c.resolve();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(doc);
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("override '" + item + "' must look like section.key=value");
        }
        const std::string path = item.substr(0, eq);
        const std::string raw = item.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &doc;
        std::stringstream ss(path);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
            node = &(*node)[parts[i]];
            if (!node->is_object()) throw ConfigError("override path '" + path + "' crosses a non-object key");
        }
        (*node)[parts.back()] = value;
    }
}

}  // namespace stemjepa
