// hmerge: merge two fine-tuned checkpoints that share a base model.
//
// usage:
//   hmerge merge <recipe> [--threads N] [--report PATH] [--align-log PATH]
//   hmerge inspect <path>
//   hmerge diff <a> <b> [--tol X]
//   hmerge gen-toy <out-dir> [--seed N] [--preset mistral-micro]

#include "hmerge/error.hpp"
#include "hmerge/pipeline.hpp"
#include "hmerge/testkit.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

#include <iostream>

int main(int argc, char ** argv) {
    CLI::App app{"Parameter-space merging of transformer checkpoints"};
    app.require_subcommand(1);
    app.fallthrough();

    std::size_t threads = 1;
    std::string report;
    app.add_option("--threads", threads, "worker threads for merge")->check(CLI::PositiveNumber);
    app.add_option("--report", report, "per-layer weight report (hierarchical merges)");

    std::string recipe_path, align_log;
    auto * merge = app.add_subcommand("merge", "run a merge recipe");
    merge->add_option("recipe", recipe_path, "recipe file")->required();
    merge->add_option("--align-log", align_log, "write one line per aligned attention tensor");

    std::string inspect_path;
    auto * inspect = app.add_subcommand("inspect", "summarize a checkpoint");
    inspect->add_option("path", inspect_path, "archive, shard index or model directory")->required();

    std::string diff_a, diff_b;
    double tol = 0.0;
    auto * diff = app.add_subcommand("diff", "per-tensor max abs difference between two checkpoints");
    diff->add_option("a", diff_a)->required();
    diff->add_option("b", diff_b)->required();
    diff->add_option("--tol", tol, "exit 0 when the global max difference is at most this");

    std::string out_dir, preset = "mistral-micro";
    std::uint64_t seed = 0;
    auto * gen = app.add_subcommand("gen-toy", "write a deterministic toy base/parent trio");
    gen->add_option("out-dir", out_dir)->required();
    gen->add_option("--seed", seed);
    gen->add_option("--preset", preset);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : hmerge::kExitRecipeError;
    }

    if (*merge) {
        hmerge::MergeOptions options;
        options.threads = threads;
        if (!report.empty()) {
            options.report = report;
        }
        if (!align_log.empty()) {
            options.align_log = align_log;
        }
        return hmerge::merge_command(recipe_path, options, std::cout, std::cerr);
    }
    if (*inspect) {
        return hmerge::inspect_command(inspect_path, std::cout, std::cerr);
    }
    if (*diff) {
        return hmerge::diff_command(diff_a, diff_b, tol, std::cout, std::cerr);
    }
    if (*gen) {
        try {
            const auto p    = hmerge::testkit::preset_by_name(preset, seed);
            const auto trio = hmerge::testkit::gen_toy_trio(p);
            hmerge::testkit::write_toy_trio(trio, p, out_dir);
            fmt::print("wrote toy trio ({} tensors, {} parameters) to {}\n", trio.base.tensors.size(),
                       trio.manifest.parameter_count, out_dir);
            return hmerge::kExitOk;
        } catch (const hmerge::Error & e) {
            fmt::print(stderr, "{}: {}\n", hmerge::to_string(e.kind()), e.what());
            return e.kind() == hmerge::ErrorKind::Parameter ? hmerge::kExitRecipeError : hmerge::kExitInputError;
        }
    }
    return hmerge::kExitInputError;
}
