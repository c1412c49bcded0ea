#pragma once

#include "hmerge/hierarchical.hpp"
#include "hmerge/recipe.hpp"

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace hmerge {

/// Process exit codes shared by every subcommand.
enum ExitCode : int {
    kExitOk            = 0,
    kExitInputError    = 1,
    kExitRecipeError   = 2,
    kExitOverTolerance = 3,
};

/// F32 tensor workspace whose live count is tracked per thread.
///
/// The merge pipeline allocates every per-tensor F32 buffer through this
/// type, which lets tests assert the streaming memory bound.
class Workspace {
public:
    explicit Workspace(std::size_t n);
    ~Workspace();

    Workspace(const Workspace &)             = delete;
    Workspace & operator=(const Workspace &) = delete;

    std::span<float> span() noexcept { return values_; }
    std::span<const float> span() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

    /// Highest number of workspaces simultaneously alive on any one thread since the last reset.
    static int peak_per_thread() noexcept;
    static void reset_peak() noexcept;

private:
    std::vector<float> values_;
};

struct MergeOptions {
    std::size_t threads = 1;
    std::optional<std::filesystem::path> report;     // overrides the recipe's report path
    std::optional<std::filesystem::path> align_log;  // one line per aligned tensor
};

struct MergeSummary {
    std::size_t tensors = 0;
    std::vector<LayerWeightReport> reports;  // hierarchical only, name order
    double check_ms = 0.0;
    double merge_ms = 0.0;
    int peak_workspaces = 0;
};

/// Streams base/parent tensors through the recipe's method and writes the merged archive.
/// Throws Error on any failure; the output file is only created on success.
MergeSummary run_merge(const RecipeFile & recipe, const MergeOptions & options);

/// Maps an error to the CLI exit code (2 for recipe errors, 1 otherwise).
int exit_code_for(const std::exception & e) noexcept;

// CLI entry points; each prints to `out`/`err` and returns an exit code.
int merge_command(const std::filesystem::path & recipe_path, const MergeOptions & options, std::ostream & out,
                  std::ostream & err);
int inspect_command(const std::filesystem::path & path, std::ostream & out, std::ostream & err);
int diff_command(const std::filesystem::path & a, const std::filesystem::path & b, double tolerance,
                 std::ostream & out, std::ostream & err);

} // namespace hmerge
