#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "stemjepa/analysis.h"
#include "stemjepa/commands.h"
#include "stemjepa/config.h"
#include "stemjepa/error.h"
#include "stemjepa/inference.h"
#include "stemjepa/training.h"

namespace py = pybind11;
using namespace stemjepa;
using nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

AudioChunk to_audio(const FloatArray& samples, int sample_rate) {
    if (samples.ndim() != 1) throw InputError("audio must be a 1-D array of samples");
    AudioChunk a;
    a.sample_rate = sample_rate;
    a.samples.assign(samples.data(), samples.data() + samples.size());
    return a;
}

FrontendConfig frontend_from(const std::string& section) {
    const RunConfig cfg = run_config_from_json(json{{"frontend", json::parse(section)}});
    cfg.frontend.validate();
    return cfg.frontend;
}

// A model together with the run configuration it was built from.
struct PyModel {
    RunConfig cfg;
    ModelState state;

    static PyModel fresh(const std::string& config, std::uint64_t seed) {
        RunConfig cfg = run_config_from_json(json::parse(config));
        cfg.resolve();
        return {cfg, ModelState(cfg.model, seed)};
    }

    static PyModel load(const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        RunConfig cfg = run_config_from_json(ck.snapshot);
        return {cfg, std::move(ck.state)};
    }

    const Encoder<float>& encoder(const std::string& role) const {
        if (role == "context") return state.context;
        if (role == "target") return state.target;
        throw InputError("role must be 'context' or 'target', got '" + role + "'");
    }

    // One [tokens x d] grid per consecutive window of the clip.
    std::vector<MatrixF> encode(const FloatArray& samples, int sample_rate, const std::string& role) const {
        AudioChunk a = to_audio(samples, sample_rate);
        if (a.sample_rate != cfg.frontend.sample_rate) a = resample(a, cfg.frontend.sample_rate);
        std::vector<MatrixF> out;
        for (const auto& w : chunk_windows(a, cfg.frontend.chunk_samples(), true)) {
            out.push_back(encode_audio(encoder(role), w, cfg.frontend).vectors);
        }
        return out;
    }

    MatrixF predict(const MatrixF& context, const std::optional<std::string>& label) const {
        const int fp = cfg.frontend.freq_patches();
        if (context.rows() % fp != 0) {
            throw InputError("token count " + std::to_string(context.rows()) + " is not a multiple of " +
                             std::to_string(fp) + " frequency patches");
        }
        EmbeddingGrid z;
        z.vectors = context;
        z.freq_patches = fp;
        z.time_patches = static_cast<int>(context.rows()) / fp;
        for (int k = 0; k < z.tokens(); ++k) z.coords.push_back({k % fp, k / fp});
        return stemjepa::predict(state, z, label).vectors;
    }

    Eigen::VectorXf embed(const FloatArray& samples, int sample_rate, const std::string& pooling) const {
        AudioChunk a = to_audio(samples, sample_rate);
        if (a.sample_rate != cfg.frontend.sample_rate) a = resample(a, cfg.frontend.sample_rate);
        const Pooling p = pooling_from_string(pooling);
        const auto windows = chunk_windows(a, cfg.frontend.chunk_samples(), true);
        Eigen::VectorXf sum;
        for (const auto& w : windows) {
            const Eigen::VectorXf v = pool(encode_audio(state.context, w, cfg.frontend), p);
            sum = sum.size() ? Eigen::VectorXf(sum + v) : v;
        }
        return sum / static_cast<float>(windows.size());
    }
};

std::filesystem::path run_command(const std::string& name, const std::optional<std::string>& config,
                                  const std::optional<std::string>& out, const std::optional<std::string>& checkpoint,
                                  const std::optional<std::string>& embeddings, const std::vector<std::string>& overrides,
                                  bool force, bool resume, bool quiet) {
    CommandOptions o;
    o.config_path = config.value_or("");
    o.out = out.value_or("");
    o.checkpoint = checkpoint.value_or("");
    o.embeddings = embeddings.value_or("");
    o.overrides = overrides;
    o.force = force;
    o.resume = resume;
    o.quiet = quiet;
    py::gil_scoped_release release;
    if (name == "synth") return cmd_synth(o);
    if (name == "train") return cmd_train(o);
    if (name == "embed") return cmd_embed(o);
    if (name == "retrieve") return cmd_retrieve(o);
    if (name == "align") return cmd_align(o);
    if (name == "cluster") return cmd_cluster(o);
    if (name == "probe") return cmd_probe(o);
    throw ConfigError("unknown command '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Stem-JEPA native core";

    static py::exception<Error> base(m, "StemJepaError", PyExc_RuntimeError);
    static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
    static py::exception<InputError> input_error(m, "InputError", base.ptr());
    static py::exception<IoError> io_error(m, "IoError", base.ptr());
    static py::exception<CorruptionError> corruption_error(m, "CorruptionError", base.ptr());
    static py::exception<NumericalError> numerical_error(m, "NumericalError", base.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ConfigError& e) {
            py::set_error(config_error, e.what());
        } catch (const InputError& e) {
            py::set_error(input_error, e.what());
        } catch (const IoError& e) {
            py::set_error(io_error, e.what());
        } catch (const CorruptionError& e) {
            py::set_error(corruption_error, e.what());
        } catch (const NumericalError& e) {
            py::set_error(numerical_error, e.what());
        } catch (const Error& e) {
            py::set_error(base, e.what());
        }
    });

    m.def("default_config", [] { return to_json(RunConfig{}).dump(); }, "Default run configuration as JSON text.");
    m.def(
        "log_mel",
        [](const FloatArray& samples, int sample_rate, const std::string& frontend) {
            return compute_log_mel(to_audio(samples, sample_rate), frontend_from(frontend)).values;
        },
        py::arg("samples"), py::arg("sample_rate"), py::arg("frontend") = "{}",
        "Log-mel spectrogram [n_mels x frames].");
    m.def(
        "patchify",
        [](const MatrixF& spec, int patch_f, int patch_t) {
            LogMelSpectrogram s;
            s.values = spec;
            const PatchGrid g = patchify(s, patch_f, patch_t);
            return py::make_tuple(g.patches, g.freq_patches, g.time_patches);
        },
        py::arg("spectrogram"), py::arg("patch_f") = 16, py::arg("patch_t") = 16,
        "Split a spectrogram into patches; returns (patches [K x patch_f*patch_t], F_p, T_p).");
    m.def(
        "jepa_loss", [](const nn::Matrix<double>& pred, const nn::Matrix<double>& target) { return jepa_loss<double>(pred, target); },
        py::arg("pred"), py::arg("target"));
    m.def("ema_schedule", &ema_schedule, py::arg("step"), py::arg("total_steps"), py::arg("tau_start"), py::arg("tau_end"));
    m.def("lr_schedule", &lr_schedule, py::arg("step"), py::arg("total_steps"), py::arg("base_lr"),
          py::arg("warmup_steps"));
    m.def(
        "alignment_similarity",
        [](const std::vector<MatrixF>& z, const std::vector<MatrixF>& q, int shift) {
            return alignment_similarity(z, q, shift);
        },
        py::arg("z"), py::arg("q"), py::arg("shift"));
    m.def(
        "read_wav",
        [](const std::filesystem::path& path) {
            const AudioChunk a = read_wav(path);
            return py::make_tuple(py::array_t<float>(static_cast<py::ssize_t>(a.samples.size()), a.samples.data()),
                                  a.sample_rate);
        },
        py::arg("path"));
    m.def(
        "write_wav",
        [](const std::filesystem::path& path, const FloatArray& samples, int sample_rate) {
            write_wav(path, to_audio(samples, sample_rate), WavSampleFormat::kFloat32);
        },
        py::arg("path"), py::arg("samples"), py::arg("sample_rate"));
    m.def("run_command", &run_command, py::arg("name"), py::arg("config") = py::none(), py::arg("out") = py::none(),
          py::arg("checkpoint") = py::none(), py::arg("embeddings") = py::none(),
          py::arg("overrides") = std::vector<std::string>{}, py::arg("force") = false, py::arg("resume") = false,
          py::arg("quiet") = true);

    py::class_<PyModel>(m, "Model")
        .def_static("from_config", &PyModel::fresh, py::arg("config") = "{}", py::arg("seed") = 0,
                    "Freshly initialized model from run-config JSON text.")
        .def_static("load", &PyModel::load, py::arg("path"), "Model stored in a training checkpoint.")
        .def_property_readonly("config", [](const PyModel& p) { return to_json(p.cfg).dump(); })
        .def_property_readonly("labels", [](const PyModel& p) { return p.cfg.model.labels; })
        .def_property_readonly("dim", [](const PyModel& p) { return p.cfg.model.encoder.width; })
        .def_property_readonly("step", [](const PyModel& p) { return p.state.step; })
        .def("encode", &PyModel::encode, py::arg("samples"), py::arg("sample_rate"), py::arg("role") = "context",
             "Per-window patch embeddings [tokens x d].")
        .def("predict", &PyModel::predict, py::arg("context"), py::arg("label") = py::none(),
             "Predicted target embeddings for one window of context embeddings.")
        .def("embed", &PyModel::embed, py::arg("samples"), py::arg("sample_rate"), py::arg("pooling") = "mean",
             "Pooled clip embedding averaged over windows.");
}
