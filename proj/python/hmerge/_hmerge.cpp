// Python bindings: kernels on float32 numpy arrays, head alignment, archive I/O and the merge pipeline.

#include "hmerge/assignment.hpp"
#include "hmerge/checkpoint.hpp"
#include "hmerge/error.hpp"
#include "hmerge/heads.hpp"
#include "hmerge/hierarchical.hpp"
#include "hmerge/kernels.hpp"
#include "hmerge/pipeline.hpp"
#include "hmerge/testkit.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace hmerge;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::span<const float> view(const FloatArray & a) {
    return {a.data(), static_cast<std::size_t>(a.size())};
}

FloatArray like(const FloatArray & shape_of, std::vector<float> values) {
    FloatArray out(std::vector<py::ssize_t>(shape_of.shape(), shape_of.shape() + shape_of.ndim()));
    std::copy(values.begin(), values.end(), out.mutable_data());
    return out;
}

void same_size(const FloatArray & a, const FloatArray & b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::Compatibility, "arrays differ in size");
    }
}

MatrixView matrix(const FloatArray & a) {
    if (a.ndim() != 2) {
        throw Error(ErrorKind::Layout, "expected a 2-D array");
    }
    return {view(a), static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))};
}

DType dtype_arg(const std::string & s) {
    if (s == "bf16" || s == "BF16") return DType::BF16;
    if (s == "f16" || s == "F16") return DType::F16;
    if (s == "f32" || s == "F32") return DType::F32;
    throw Error(ErrorKind::DType, "dtype must be bf16, f16 or f32");
}

py::dict load(const std::filesystem::path & path) {
    const Checkpoint cp = load_checkpoint(path);
    py::dict tensors;
    for (const auto & [name, t] : cp.tensors) {
        FloatArray arr(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
        decode_values_into(t, {arr.mutable_data(), static_cast<std::size_t>(arr.size())});
        tensors[py::str(name)] = std::move(arr);
    }
    return tensors;
}

void save(const std::filesystem::path & path, const std::map<std::string, FloatArray> & tensors,
          const std::string & dtype, const std::map<std::string, std::string> & metadata) {
    Checkpoint cp;
    cp.metadata = metadata;
    const DType d = dtype_arg(dtype);
    for (const auto & [name, arr] : tensors) {
        Shape shape(arr.shape(), arr.shape() + arr.ndim());
        cp.add(encode_tensor(name, std::move(shape), view(arr), d));
    }
    save_checkpoint(cp, path);
}

py::dict merge(const std::filesystem::path & recipe, std::size_t threads,
               std::optional<std::filesystem::path> report, std::optional<std::filesystem::path> align_log) {
    MergeOptions opt;
    opt.threads   = threads;
    opt.report    = std::move(report);
    opt.align_log = std::move(align_log);
    MergeSummary s;
    {
        py::gil_scoped_release release;
        s = run_merge(load_recipe(recipe), opt);
    }
    py::list reports;
    for (const auto & r : s.reports) {
        py::dict row;
        row["name"]            = r.name;
        row["w"]               = r.w;
        row["aligned"]         = r.aligned;
        row["assignment_cost"] = r.assignment_cost;
        row["permutation"]     = r.permutation ? py::cast(r.permutation->mapping) : py::none();
        reports.append(row);
    }
    py::dict out;
    out["tensors"]         = s.tensors;
    out["reports"]         = reports;
    out["peak_workspaces"] = s.peak_workspaces;
    return out;
}

std::string inspect(const std::filesystem::path & path) {
    std::ostringstream out, err;
    if (inspect_command(path, out, err) != kExitOk) {
        throw Error(ErrorKind::Io, err.str());
    }
    return out.str();
}

} // namespace

PYBIND11_MODULE(_hmerge, m) {
    m.doc() = "Parameter-space merging of transformer checkpoints";
    py::register_exception<Error>(m, "HmergeError", PyExc_RuntimeError);

    m.def(
        "linear_average",
        [](const FloatArray & a, const FloatArray & b, double alpha) {
            same_size(a, b);
            return like(a, linear_average(view(a), view(b), alpha));
        },
        py::arg("a"), py::arg("b"), py::arg("alpha") = 0.5, "(1 - alpha) * a + alpha * b");
    m.def(
        "task_arithmetic",
        [](const FloatArray & base, const FloatArray & da, const FloatArray & db, double alpha) {
            same_size(base, da);
            same_size(base, db);
            return like(base, task_arithmetic(view(base), view(da), view(db), alpha));
        },
        py::arg("base"), py::arg("da"), py::arg("db"), py::arg("alpha") = 0.5, "base + alpha * da + (1 - alpha) * db");
    m.def(
        "dare_drop_rescale",
        [](const FloatArray & d, double density, std::uint64_t seed) {
            return like(d, dare_drop_rescale(view(d), density, seed));
        },
        py::arg("d"), py::arg("density"), py::arg("seed") = 0);
    m.def(
        "ties_sign_consensus",
        [](const FloatArray & da, const FloatArray & db, double weight_a) {
            same_size(da, db);
            return like(da, ties_sign_consensus(view(da), view(db), weight_a));
        },
        py::arg("da"), py::arg("db"), py::arg("weight_a") = 0.5);
    m.def(
        "della_magprune",
        [](const FloatArray & d, double density, double epsilon, std::uint64_t seed) {
            return like(d, della_magprune(view(d), density, epsilon, seed));
        },
        py::arg("d"), py::arg("density"), py::arg("epsilon"), py::arg("seed") = 0);
    m.def(
        "breadcrumbs_mask",
        [](const FloatArray & d, double density, double gamma) {
            return like(d, breadcrumbs_mask(view(d), density, gamma));
        },
        py::arg("d"), py::arg("density"), py::arg("gamma"));
    m.def(
        "layer_weight",
        [](const FloatArray & da, const FloatArray & db) {
            same_size(da, db);
            return layer_weight(view(da), view(db));
        },
        py::arg("da"), py::arg("db"), "max(0, cos(da, db)); 0 if either is all zero");

    m.def(
        "linear_sum_assignment",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> c) {
            if (c.ndim() != 2 || c.shape(0) != c.shape(1)) {
                throw Error(ErrorKind::Parameter, "cost matrix must be square");
            }
            const auto n = static_cast<std::size_t>(c.shape(0));
            return linear_sum_assignment(CostMatrix(n, std::vector<double>(c.data(), c.data() + n * n))).mapping;
        },
        py::arg("cost"), "Minimum-cost permutation; mapping[i] is the column assigned to row i");
    m.def(
        "align_heads",
        [](const FloatArray & a, const FloatArray & b, std::size_t num_heads, std::size_t head_dim,
           const std::string & axis) {
            if (axis != "rows" && axis != "columns") {
                throw Error(ErrorKind::Layout, "axis must be 'rows' or 'columns'");
            }
            const HeadLayout layout{num_heads, head_dim, axis == "rows" ? SplitAxis::Rows : SplitAxis::Columns};
            auto [aligned, result] = align_heads(matrix(a), matrix(b), layout);
            return py::make_tuple(like(b, std::move(aligned)), result.permutation.mapping, result.cost);
        },
        py::arg("a"), py::arg("b"), py::arg("num_heads"), py::arg("head_dim"), py::arg("axis") = "rows",
        "Reorders b's heads to match a; returns (aligned_b, permutation, cost)");

    m.def("load", &load, py::arg("path"), "Tensors of an archive, shard index or model directory as float32 arrays");
    m.def("save", &save, py::arg("path"), py::arg("tensors"), py::arg("dtype") = "f32",
          py::arg("metadata") = std::map<std::string, std::string>{});
    m.def("inspect", &inspect, py::arg("path"));
    m.def("merge", &merge, py::arg("recipe"), py::arg("threads") = 1, py::arg("report") = py::none(),
          py::arg("align_log") = py::none(), "Runs a recipe file; returns a summary dict");
    m.def(
        "gen_toy",
        [](const std::filesystem::path & out_dir, std::uint64_t seed, const std::string & preset) {
            const auto p    = testkit::preset_by_name(preset, seed);
            const auto trio = testkit::gen_toy_trio(p);
            testkit::write_toy_trio(trio, p, out_dir);
            return trio.manifest.parameter_count;
        },
        py::arg("out_dir"), py::arg("seed") = 0, py::arg("preset") = "mistral-micro",
        "Writes a toy base/parent trio; returns its parameter count");
}
