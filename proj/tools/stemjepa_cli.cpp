// stemjepa: corpus synthesis, training and evaluation from the command line.

#include <exception>
#include <iostream>
#include <new>

#include <CLI11.hpp>

#include "stemjepa/commands.h"
#include "stemjepa/error.h"

using namespace stemjepa;

namespace {

void add_common(CLI::App* cmd, CommandOptions& o) {
    cmd->add_option("-c,--config", o.config_path, "JSON run configuration");
    cmd->add_option("-s,--set", o.overrides, "override a config key, e.g. train.total_steps=100")
        ->allow_extra_args(false);
    cmd->add_option("-o,--out", o.out, "output directory");
    cmd->add_flag("-q,--quiet", o.quiet, "only report errors");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stem-JEPA: joint-embedding predictive training on multitrack stems"};
    app.require_subcommand(1);
    CommandOptions o;

    auto* synth = app.add_subcommand("synth", "render a synthetic multitrack corpus");
    add_common(synth, o);
    synth->add_flag("-f,--force", o.force, "write into a non-empty output directory");

    auto* train = app.add_subcommand("train", "train encoder and predictor");
    add_common(train, o);
    train->add_flag("-f,--force", o.force, "write into a non-empty output directory");
    train->add_flag("-r,--resume", o.resume, "continue from <out>/last.ckpt (or --checkpoint)");
    train->add_option("--checkpoint", o.checkpoint, "checkpoint to resume from");

    auto* embed = app.add_subcommand("embed", "write reference and query embedding stores");
    auto* retrieve = app.add_subcommand("retrieve", "stem retrieval metrics");
    auto* align = app.add_subcommand("align", "temporal alignment curves");
    auto* cluster = app.add_subcommand("cluster", "k-means label co-occurrence");
    auto* probe = app.add_subcommand("probe", "downstream probe on global embeddings");
    for (auto* cmd : {embed, retrieve, align, cluster, probe}) {
        add_common(cmd, o);
        cmd->add_option("--checkpoint", o.checkpoint, "trained model checkpoint");
    }
    retrieve->add_option("--embeddings", o.embeddings, "directory written by `embed` (replaces --checkpoint)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
    }

    try {
        if (*synth) cmd_synth(o);
        if (*train) cmd_train(o);
        if (*embed) cmd_embed(o);
        if (*retrieve) cmd_retrieve(o);
        if (*align) cmd_align(o);
        if (*cluster) cmd_cluster(o);
        if (*probe) cmd_probe(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const std::bad_alloc&) {
        std::cerr << "error: out of memory\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
