#include "hmerge/pipeline.hpp"

#include "hmerge/checkpoint.hpp"
#include "hmerge/error.hpp"
#include "hmerge/kernels.hpp"

#include <fmt/core.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <ostream>
#include <thread>

namespace hmerge {

namespace fs = std::filesystem;

namespace {

thread_local int t_live_workspaces = 0;
std::atomic<int> g_peak_workspaces{0};

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

} // namespace

Workspace::Workspace(std::size_t n) : values_(n) {
    const int live = ++t_live_workspaces;
    int peak       = g_peak_workspaces.load(std::memory_order_relaxed);
    while (live > peak && !g_peak_workspaces.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
    }
}

Workspace::~Workspace() {
    --t_live_workspaces;
}

int Workspace::peak_per_thread() noexcept {
    return g_peak_workspaces.load();
}

void Workspace::reset_peak() noexcept {
    g_peak_workspaces.store(0);
}

namespace {

struct TensorJob {
    const std::string * name = nullptr;
    DType out_dtype          = DType::F32;
    TensorRecord result;
    std::optional<LayerWeightReport> report;
    std::exception_ptr error;
};

void read_into(const ArchiveReader & reader, const std::string & name, Workspace & ws) {
    const TensorRecord rec = reader.read(name);
    decode_values_into(rec, ws.span());
}

void merge_one(const MergeRecipe & recipe, const LayerClassifier & classifier, const ArchiveReader & base,
               const ArchiveReader & a, const ArchiveReader & b, TensorJob & job) {
    const std::string & name = *job.name;
    const Shape & shape      = base.info(name).shape;
    const std::size_t n      = base.info(name).numel();

    Workspace wa(n);
    Workspace wb(n);
    read_into(a, name, wa);
    read_into(b, name, wb);

    if (recipe.method == MergeMethod::Hierarchical) {
        double w = 0.0;
        {
            Workspace wbase(n);
            read_into(base, name, wbase);
            w = layer_weight_from_parents(wbase.span(), wa.span(), wb.span());
        }
        const LayerClass cls = classifier.classify(name);
        if (cls.kind == LayerKind::AttentionProjection) {
            Workspace scratch(n);
            job.report = merge_layer(cls, w, shape, wa.span(), wb.span(), scratch.span());
        } else {
            job.report = merge_layer(cls, w, shape, wa.span(), wb.span(), {});
        }
    } else if (recipe.method == MergeMethod::LinearAverage) {
        merge_tensor_elementwise(recipe, name, {}, wa.span(), wb.span());
    } else {
        Workspace wbase(n);
        read_into(base, name, wbase);
        merge_tensor_elementwise(recipe, name, wbase.span(), wa.span(), wb.span());
    }
    job.result = encode_tensor(name, shape, wa.span(), job.out_dtype);
}

std::map<std::string, Shape> shapes_of(const ArchiveReader & r) {
    std::map<std::string, Shape> out;
    for (const auto & [name, info] : r.tensors()) {
        out.emplace(name, info.shape);
    }
    return out;
}

} // namespace

MergeSummary run_merge(const RecipeFile & rf, const MergeOptions & options) {
    rf.recipe.validate();
    const MergeRecipe & recipe = rf.recipe;
    const LayerClassifier classifier(recipe.attention_patterns);
    const std::size_t threads = std::max<std::size_t>(1, options.threads);

    MergeSummary summary;
    const auto t0 = std::chrono::steady_clock::now();
    const ArchiveReader base(rf.base);
    const ArchiveReader a(rf.parent_a);
    const ArchiveReader b(rf.parent_b);
    const auto base_shapes = shapes_of(base);
    check_compatible(base_shapes, shapes_of(a), "base", "parent_a");
    check_compatible(base_shapes, shapes_of(b), "base", "parent_b");

    std::vector<const std::string *> names;
    std::vector<ArchiveWriter::Entry> entries;
    for (const auto & [name, info] : base.tensors()) {
        names.push_back(&name);
        entries.push_back({name, rf.output_dtype.value_or(a.info(name).dtype), info.shape});
    }
    summary.check_ms = elapsed_ms(t0);

    const auto t1 = std::chrono::steady_clock::now();
    Workspace::reset_peak();
    std::vector<ArchiveWriter::Entry> plan = entries;
    ArchiveWriter writer(rf.output, std::move(plan), {{"merge_method", std::string(method_name(recipe.method))}});

    // Tensors go through the workers in windows of `threads`; the writer drains
    // each window in name order, so at most one window of results is resident.
    for (std::size_t start = 0; start < names.size(); start += threads) {
        const std::size_t count = std::min(threads, names.size() - start);
        std::vector<TensorJob> jobs(count);
        for (std::size_t k = 0; k < count; ++k) {
            jobs[k].name      = names[start + k];
            jobs[k].out_dtype = entries[start + k].dtype;
        }
        auto work = [&](TensorJob & job) {
            try {
                merge_one(recipe, classifier, base, a, b, job);
            } catch (...) {
                job.error = std::current_exception();
            }
        };
        if (count == 1) {
            work(jobs[0]);
        } else {
            std::vector<std::jthread> pool;
            pool.reserve(count);
            for (auto & job : jobs) {
                pool.emplace_back(work, std::ref(job));
            }
        }
        for (auto & job : jobs) {
            if (job.error) {
                std::rethrow_exception(job.error);
            }
            writer.write(job.result);
            job.result = {};
            if (job.report) {
                summary.reports.push_back(std::move(*job.report));
            }
        }
    }
    writer.commit();
    summary.merge_ms        = elapsed_ms(t1);
    summary.tensors         = names.size();
    summary.peak_workspaces = Workspace::peak_per_thread();

    const auto report_path = options.report ? options.report : rf.report;
    if (report_path && recipe.method == MergeMethod::Hierarchical) {
        std::ofstream out(*report_path);
        out << format_report_table(summary.reports);
        if (!out) {
            throw Error(ErrorKind::Io, fmt::format("cannot write report '{}'", report_path->string()));
        }
    }
    if (options.align_log) {
        std::ofstream out(*options.align_log);
        for (const auto & r : summary.reports) {
            if (r.aligned) {
                out << format_alignment_line(r) << '\n';
            }
        }
        if (!out) {
            throw Error(ErrorKind::Io, fmt::format("cannot write alignment log '{}'", options.align_log->string()));
        }
    }
    return summary;
}

int exit_code_for(const std::exception & e) noexcept {
    if (const auto * err = dynamic_cast<const Error *>(&e)) {
        return err->kind() == ErrorKind::Recipe ? kExitRecipeError : kExitInputError;
    }
    return kExitInputError;
}

int merge_command(const fs::path & recipe_path, const MergeOptions & options, std::ostream & out,
                  std::ostream & err) {
    RecipeFile rf;
    try {
        rf = load_recipe(recipe_path);
    } catch (const std::exception & e) {
        fmt::print(err, "recipe error: {}\n", e.what());
        return kExitRecipeError;
    }
    try {
        const MergeSummary s = run_merge(rf, options);
        fmt::print(out, "merged {} tensors with {} -> {}\n", s.tensors, method_name(rf.recipe.method),
                   rf.output.string());
        fmt::print(out, "timing [{}]: load+check {:.1f} ms, merge+write {:.1f} ms, threads {}\n",
                   method_name(rf.recipe.method), s.check_ms, s.merge_ms, std::max<std::size_t>(1, options.threads));
        if ((options.report || rf.report) && rf.recipe.method != MergeMethod::Hierarchical) {
            fmt::print(err, "note: per-layer reports are only produced by the hierarchical method\n");
        }
        return kExitOk;
    } catch (const Error & e) {
        fmt::print(err, "{}: {}\n", to_string(e.kind()), e.what());
        return exit_code_for(e);
    } catch (const std::exception & e) {
        fmt::print(err, "error: {}\n", e.what());
        return kExitInputError;
    }
}

int inspect_command(const fs::path & path, std::ostream & out, std::ostream & err) {
    try {
        const ArchiveReader reader(path);
        struct Totals {
            std::size_t tensors = 0;
            std::uint64_t params = 0;
            std::uint64_t bytes  = 0;
        };
        std::map<std::string_view, Totals> by_dtype;
        std::uint64_t params = 0;
        for (const auto & [name, info] : reader.tensors()) {
            auto & t = by_dtype[dtype_name(info.dtype)];
            ++t.tensors;
            t.params += info.numel();
            t.bytes += info.end - info.begin;
            params += info.numel();
        }
        fmt::print(out, "{} tensors\n", reader.tensors().size());
        fmt::print(out, "parameters: {}\n", params);
        for (const auto & [dtype, t] : by_dtype) {
            fmt::print(out, "{}: {} tensors, {} parameters, {} bytes\n", dtype, t.tensors, t.params, t.bytes);
        }
        if (!reader.tensors().empty()) {
            fmt::print(out, "first: {}\n", reader.tensors().begin()->first);
            fmt::print(out, "last: {}\n", reader.tensors().rbegin()->first);
        }
        return kExitOk;
    } catch (const std::exception & e) {
        fmt::print(err, "error: {}\n", e.what());
        return kExitInputError;
    }
}

int diff_command(const fs::path & a_path, const fs::path & b_path, double tolerance, std::ostream & out,
                 std::ostream & err) {
    double global = 0.0;
    try {
        const ArchiveReader a(a_path);
        const ArchiveReader b(b_path);
        check_compatible(shapes_of(a), shapes_of(b), a_path.string(), b_path.string());
        for (const auto & [name, info] : a.tensors()) {
            const auto va = decode_values(a.read(name));
            const auto vb = decode_values(b.read(name));
            double worst  = 0.0;
            for (std::size_t i = 0; i < va.size(); ++i) {
                const bool nan_a = std::isnan(va[i]);
                const bool nan_b = std::isnan(vb[i]);
                double d         = 0.0;
                if (nan_a || nan_b) {
                    d = nan_a && nan_b ? 0.0 : INFINITY;
                } else if (va[i] != vb[i]) {
                    d = std::abs(static_cast<double>(va[i]) - static_cast<double>(vb[i]));
                }
                worst = std::max(worst, d);
            }
            fmt::print(out, "{}\t{:.9g}\n", name, worst);
            global = std::max(global, worst);
        }
    } catch (const std::exception & e) {
        fmt::print(err, "error: {}\n", e.what());
        return kExitInputError;
    }
    fmt::print(out, "max abs difference: {:.9g} (tolerance {:.9g})\n", global, tolerance);
    return global <= tolerance ? kExitOk : kExitOverTolerance;
}

} // namespace hmerge
