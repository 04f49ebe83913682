// pybind11 surface over the core laboratory: resolvers, dataset generation,
// the numeric primitives, training/evaluation, and figure-grid dumps.

#include "permnet/harness.hpp"
#include "permnet/report.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace permnet;

namespace {

TaskSpec spec_from_args(const std::string& family, int length_min, int length_max, long count,
                        std::uint64_t seed, long long value_min, long long value_max) {
    TaskSpec spec;
    spec.family = family_from_name(family);
    spec.length_min = length_min;
    spec.length_max = length_max;
    spec.example_count = static_cast<int>(count);
    spec.master_seed = seed;
    spec.value_min = value_min;
    spec.value_max = value_max;
    spec.validate();
    return spec;
}

RunConfig config_from_dict(const py::dict& d) {
    std::ostringstream os;
    for (auto item : d)
        os << py::str(item.first).cast<std::string>() << " = "
           << py::str(item.second).cast<std::string>() << "\n";
    std::istringstream is(os.str());
    return parse_config(is);
}

py::dict result_to_dict(const TrainResult& r) {
    py::dict out;
    out["test_ta"] = r.test.ta;
    out["test_wea"] = r.test.wea;
    out["test_examples"] = r.test.examples;
    out["diverged"] = r.diverged;
    out["seconds"] = r.seconds;
    out["checkpoint"] = r.checkpoint_path;
    out["metrics"] = r.metrics_path;
    py::list epochs;
    for (const auto& e : r.epochs) {
        py::dict ed;
        ed["epoch"] = e.epoch;
        ed["train_loss"] = e.train_loss;
        ed["val_ta"] = e.val_ta;
        ed["val_wea"] = e.val_wea;
        epochs.append(ed);
    }
    out["epochs"] = epochs;
    return out;
}

} // namespace

PYBIND11_MODULE(_permnet, m) {
    m.doc() = "indexing-by-permutation benchmark laboratory";

    // ---- resolvers ----------------------------------------------------
    m.def("resolve_direct", &resolve_direct, py::arg("data"), py::arg("indices"),
          "out[k] = data[indices[k]] with 0-based permutation indices");
    m.def(
        "resolve_indirect",
        [](const std::vector<std::pair<std::string, std::string>>& pairs,
           const std::vector<std::string>& queries) {
            std::vector<DataKeyPair> dk;
            dk.reserve(pairs.size());
            for (const auto& [d, k] : pairs) dk.push_back({d, k});
            return resolve_indirect(dk, queries);
        },
        py::arg("pairs"), py::arg("queries"),
        "out[k] = data of the (data, key) pair whose key matches queries[k]");

    // ---- numeric primitives --------------------------------------------
    m.def(
        "mlog_softmax",
        [](const Eigen::VectorXd& x) { return mlog_softmax(x); }, py::arg("x"),
        "ln(1 + (e-1) * softmax(x)), elementwise over a vector");
    m.def(
        "antidiagonal_sum",
        [](const Eigen::MatrixXd& m) { return antidiagonal_sum(m); }, py::arg("m"),
        "out[p] = sum of m[s, j] over s + j = p, truncated to the row count");
    m.def(
        "scatter_accumulate",
        [](const Eigen::VectorXd& weights, const std::vector<int>& ids, int vocab_size) {
            return scatter_accumulate(weights, ids, vocab_size);
        },
        py::arg("weights"), py::arg("ids"), py::arg("vocab_size"),
        "out[ids[t]] += weights[t] over a vocab_size-long vector");

    // ---- dataset generation -------------------------------------------
    m.def(
        "generate_dataset",
        [](const std::string& family, int length_min, int length_max, long count,
           std::uint64_t seed, const std::string& out_dir, long long value_min,
           long long value_max) {
            TaskSpec spec = spec_from_args(family, length_min, length_max, count, seed,
                                           value_min, value_max);
            auto examples = generate(spec);
            auto splits = dedup_and_split(std::move(examples), spec.split_ratios);
            std::vector<Example> all;
            for (const auto* s : {&splits.train, &splits.valid, &splits.test})
                all.insert(all.end(), s->begin(), s->end());
            Vocabulary vocab = build_vocab(all);
            write_dataset_dir(spec, splits, vocab, out_dir);
            py::dict d;
            d["train"] = splits.train.size();
            d["valid"] = splits.valid.size();
            d["test"] = splits.test.size();
            d["vocab"] = vocab.size();
            return d;
        },
        py::arg("family"), py::arg("length_min"), py::arg("length_max"), py::arg("count"),
        py::arg("seed"), py::arg("out_dir"), py::arg("value_min") = -128,
        py::arg("value_max") = 127,
        "generate, dedup, split, and write a dataset directory");
    m.def(
        "generate_examples",
        [](const std::string& family, int length_min, int length_max, long count,
           std::uint64_t seed) {
            TaskSpec spec = spec_from_args(family, length_min, length_max, count, seed,
                                           -128, 127);
            auto examples = generate(spec);
            py::list out;
            for (const auto& e : examples) out.append(py::make_tuple(e.source, e.target));
            return out;
        },
        py::arg("family"), py::arg("length_min"), py::arg("length_max"), py::arg("count"),
        py::arg("seed"), "generate (source, target) token-list pairs without writing files");

    // ---- presets / config ----------------------------------------------
    m.def(
        "preset",
        [](const std::string& name) {
            RunConfig c = preset(name);
            std::istringstream is(serialize_config(c));
            py::dict d;
            std::string line;
            while (std::getline(is, line)) {
                auto eq = line.find('=');
                if (eq == std::string::npos) continue;
                std::string key = line.substr(0, eq - 1);
                std::string val = line.substr(eq + 2);
                d[py::str(key)] = val;
            }
            return d;
        },
        py::arg("name"), "hyperparameter preset as a dict of strings");

    // ---- training / evaluation -----------------------------------------
    m.def(
        "train",
        [](const py::dict& config, int precision) {
            RunConfig cfg = config_from_dict(config);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = precision == 64 ? train_from_dir<double>(cfg) : train_from_dir<float>(cfg);
            }
            return result_to_dict(r);
        },
        py::arg("config"), py::arg("precision") = 32,
        "train from a config dict (same keys as the CLI config file)");
    m.def(
        "evaluate",
        [](const std::string& checkpoint, const std::string& data_dir, const std::string& split,
           long limit, int precision) {
            auto run = [&](auto tag) {
                using S = decltype(tag);
                auto [model, cfg] = model_from_checkpoint<S>(checkpoint);
                LoadedDataset ds = load_dataset_dir(data_dir);
                EncodedData data = encode_dataset(ds);
                const EncodedSplit* sp = split == "train" ? &data.train
                                         : split == "valid" ? &data.valid
                                                            : &data.test;
                EvalResult r;
                {
                    py::gil_scoped_release release;
                    r = evaluate_all(*model, *sp, limit);
                }
                py::dict d;
                d["ta"] = r.ta;
                d["wea"] = r.wea;
                d["examples"] = r.examples;
                return d;
            };
            return precision == 64 ? run(double{}) : run(float{});
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test", py::arg("limit") = 0,
        py::arg("precision") = 32, "evaluate a checkpoint on a dataset split");

    // ---- diagnostics -----------------------------------------------------
    m.def(
        "index_embedding",
        [](const std::string& checkpoint, const std::string& data_dir) {
            auto [model, cfg] = model_from_checkpoint<float>(checkpoint);
            LoadedDataset ds = load_dataset_dir(data_dir);
            Grid g = index_embedding_grid(model->params(), ds.vocab);
            return py::make_tuple(g.row_labels, g.values, diagonal_dominance(g));
        },
        py::arg("checkpoint"), py::arg("data"),
        "(row_labels, weights, diagonal_dominance) of the index embedding");
    m.def(
        "mdp_matrix",
        [](const std::string& checkpoint, const std::string& data_dir, long example_index) {
            auto [model, cfg] = model_from_checkpoint<float>(checkpoint);
            auto* pni = dynamic_cast<PermNetI<float>*>(model.get());
            if (!pni) throw std::runtime_error("mdp needs a permnet-i checkpoint");
            LoadedDataset ds = load_dataset_dir(data_dir);
            const auto& split = ds.splits.test;
            if (example_index < 0 ||
                static_cast<std::size_t>(example_index) >= split.size())
                throw std::runtime_error("example index out of range");
            auto src = ds.vocab.encode(split[static_cast<std::size_t>(example_index)].source);
            IndirectTrace tr = pni->trace(src);
            return tr.assoc.m_dp;
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("example") = 0,
        "M_dp association matrix of one test example");
}
