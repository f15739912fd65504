#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stemjepa/config.h"
#include "stemjepa/dataio.h"

namespace stemjepa {

// Options shared by the command-line subcommands.
struct CommandOptions {
    std::string config_path;             // JSON run config; empty uses defaults (or the checkpoint's snapshot)
    std::vector<std::string> overrides;  // "section.key=value"
    std::string out;                     // output directory; overrides output_dir
    std::string checkpoint;              // model checkpoint for evaluation commands, or resume source
    std::string embeddings;              // directory written by `embed` (retrieve only)
    bool force = false;
    bool resume = false;
    bool quiet = false;
};

// Resolved configuration for a command. When `snapshot` is given and no config
// file is passed, the snapshot is the base document.
RunConfig resolve_command_config(const CommandOptions& opts, const nlohmann::json* snapshot = nullptr);

// Loads the corpus named by data.manifest, importing data.musdb_root into the
// cache directory (STEMJEPA_CACHE_DIR, default ~/.cache/stemjepa) when no manifest is set.
Corpus open_corpus(const RunConfig& cfg);

// Track indices selected by eval.split.
std::vector<std::size_t> eval_tracks(const Corpus& corpus, const RunConfig& cfg);

// Writes <dir>/config.json with the resolved configuration.
void write_config_snapshot(const std::filesystem::path& dir, const RunConfig& cfg);

std::filesystem::path cmd_synth(const CommandOptions& opts);
std::filesystem::path cmd_train(const CommandOptions& opts);
std::filesystem::path cmd_embed(const CommandOptions& opts);
std::filesystem::path cmd_retrieve(const CommandOptions& opts);
std::filesystem::path cmd_align(const CommandOptions& opts);
std::filesystem::path cmd_cluster(const CommandOptions& opts);
std::filesystem::path cmd_probe(const CommandOptions& opts);

}  // namespace stemjepa
