#pragma once

// Training harness: run configuration (flat key = value files), Appendix-B
// presets with -desk variants, the model registry, Adam with decoupled
// per-parameter weight decay, the teacher-forced training loop with
// free-running evaluation, and checkpoint policies.

#include "permnet/checkpoint.hpp"
#include "permnet/copynet.hpp"
#include "permnet/metrics.hpp"
#include "permnet/permnet_d.hpp"
#include "permnet/permnet_i.hpp"
#include "permnet/seq2seq_gru.hpp"
#include "permnet/taskgen.hpp"
#include "permnet/transformer.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

namespace permnet {

struct RunConfig {
    std::string model;        // registry name
    std::string data;         // dataset directory (gen output)
    std::string out;          // run directory
    int emb = 64;
    int hidden = 64;
    int layers = 2;           // transformer only
    int heads = 4;            // transformer only
    double lr = 1e-3;
    int batch = 64;
    int epochs = 10;
    std::uint64_t seed = 1;
    std::string ablate;       // comma-separated flag list
    std::string ckpt_policy;  // "last" (PermNets) or "best" (baselines); empty = by model
    int precision = 32;       // 32 or 64
    double grad_clip = 0.0;   // 0 = off; CopyNet presets default to 1.0
    double index_decay = 1e-3;
    long train_limit = 0;     // 0 = whole split
    long eval_limit = 2000;   // per-epoch validation subsample; 0 = whole split
    long test_limit = 0;
    double teacher_forcing = 1.0;
    bool normalize_attention = false;
    bool hidden_mix = false;

    void validate() const {
        if (model.empty()) throw std::invalid_argument("config: model is required");
        if (emb < 1 || hidden < 1 || layers < 1 || heads < 1 || batch < 1 || epochs < 1)
            throw std::invalid_argument("config: sizes must be positive");
        if (lr <= 0) throw std::invalid_argument("config: learning rate must be positive");
        if (precision != 32 && precision != 64)
            throw std::invalid_argument("config: precision must be 32 or 64");
        if (teacher_forcing < 0 || teacher_forcing > 1)
            throw std::invalid_argument("config: teacher_forcing must be in [0,1]");
    }
};

namespace cfg_detail {
inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}
} // namespace cfg_detail

inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    os << "model = " << c.model << "\n"
       << "data = " << c.data << "\n"
       << "out = " << c.out << "\n"
       << "emb = " << c.emb << "\n"
       << "hidden = " << c.hidden << "\n"
       << "layers = " << c.layers << "\n"
       << "heads = " << c.heads << "\n"
       << "lr = " << c.lr << "\n"
       << "batch = " << c.batch << "\n"
       << "epochs = " << c.epochs << "\n"
       << "seed = " << c.seed << "\n"
       << "ablate = " << c.ablate << "\n"
       << "ckpt_policy = " << c.ckpt_policy << "\n"
       << "precision = " << c.precision << "\n"
       << "grad_clip = " << c.grad_clip << "\n"
       << "index_decay = " << c.index_decay << "\n"
       << "train_limit = " << c.train_limit << "\n"
       << "eval_limit = " << c.eval_limit << "\n"
       << "test_limit = " << c.test_limit << "\n"
       << "teacher_forcing = " << c.teacher_forcing << "\n"
       << "normalize_attention = " << (c.normalize_attention ? 1 : 0) << "\n"
       << "hidden_mix = " << (c.hidden_mix ? 1 : 0) << "\n";
    return os.str();
}

inline RunConfig parse_config(std::istream& is) {
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = cfg_detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = cfg_detail::trim(t.substr(0, eq));
        std::string val = cfg_detail::trim(t.substr(eq + 1));
        try {
            if (key == "model") c.model = val;
            else if (key == "data") c.data = val;
            else if (key == "out") c.out = val;
            else if (key == "emb") c.emb = std::stoi(val);
            else if (key == "hidden") c.hidden = std::stoi(val);
            else if (key == "layers") c.layers = std::stoi(val);
            else if (key == "heads") c.heads = std::stoi(val);
            else if (key == "lr") c.lr = std::stod(val);
            else if (key == "batch") c.batch = std::stoi(val);
            else if (key == "epochs") c.epochs = std::stoi(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "ablate") c.ablate = val;
            else if (key == "ckpt_policy") c.ckpt_policy = val;
            else if (key == "precision") c.precision = std::stoi(val);
            else if (key == "grad_clip") c.grad_clip = std::stod(val);
            else if (key == "index_decay") c.index_decay = std::stod(val);
            else if (key == "train_limit") c.train_limit = std::stol(val);
            else if (key == "eval_limit") c.eval_limit = std::stol(val);
            else if (key == "test_limit") c.test_limit = std::stol(val);
            else if (key == "teacher_forcing") c.teacher_forcing = std::stod(val);
            else if (key == "normalize_attention") c.normalize_attention = std::stoi(val) != 0;
            else if (key == "hidden_mix") c.hidden_mix = std::stoi(val) != 0;
            else throw std::invalid_argument("unknown key");
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + " (" + key +
                                        "): " + e.what());
        }
    }
    return c;
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    return parse_config(is);
}

// ---- presets ---------------------------------------------------------------

/// Preset names: "<model>/<dataset>" with an optional "-desk" suffix, e.g.
/// "permnet-d/pd10", "copynet/pi20", "gru/pd10-desk". Desk variants cap
/// training at 30,000 examples and cut the epoch budget five-fold; the
/// recurrent desk presets also shrink batch (and for the big baselines,
/// width) so the runs fit a single commodity core — deviations recorded in
/// each preset's comment.
inline RunConfig preset(const std::string& name) {
    auto split = name.find('/');
    if (split == std::string::npos)
        throw std::invalid_argument("preset name must look like model/dataset: " + name);
    std::string model = name.substr(0, split);
    std::string dataset = name.substr(split + 1);
    bool desk = false;
    if (dataset.size() > 5 && dataset.ends_with("-desk")) {
        desk = true;
        dataset = dataset.substr(0, dataset.size() - 5);
    }

    RunConfig c;
    c.model = model;
    auto set = [&](int emb, int hidden, double lr, int batch, int epochs) {
        c.emb = emb;
        c.hidden = hidden;
        c.lr = lr;
        c.batch = batch;
        c.epochs = epochs;
    };

    if (model == "gru") {
        if (dataset == "pd1-10" || dataset == "pd10" || dataset == "pi1-10" || dataset == "pi10")
            set(128, 1024, 0.0003, 4096, 200);
        else
            throw std::invalid_argument("no gru preset for dataset: " + dataset);
    } else if (model == "gru-attn") {
        if (dataset == "pd1-10") set(256, 1024, 0.0003, 1024, 200);
        else if (dataset == "pd10") set(128, 1024, 0.0003, 512, 200);
        else if (dataset == "pd20") set(256, 1024, 0.0003, 512, 200);
        else if (dataset == "pi1-10") set(256, 1024, 0.0003, 1024, 800);
        else if (dataset == "pi10") set(256, 1024, 0.0003, 1024, 200);
        else throw std::invalid_argument("no gru-attn preset for dataset: " + dataset);
    } else if (model == "copynet") {
        c.grad_clip = 1.0;
        if (dataset == "pd1-10" || dataset == "pd10" || dataset == "pd20" || dataset == "pi1-10")
            set(64, 512, 0.0001, 512, 200);
        else if (dataset == "pi10") set(128, 512, 0.0001, 2048, 100);
        else if (dataset == "pi20") set(128, 512, 0.0001, 2048, 200);
        else if (dataset == "switch") set(64, 128, 0.001, 128, 40);
        else throw std::invalid_argument("no copynet preset for dataset: " + dataset);
    } else if (model == "transformer") {
        c.layers = 4;
        c.heads = 12;
        if (dataset == "pd1-10" || dataset == "pd10" || dataset == "pi1-10" || dataset == "pi10")
            set(256, 1024, 0.001, 256, 500);
        else
            throw std::invalid_argument("no transformer preset for dataset: " + dataset);
    } else if (model == "permnet-d") {
        if (dataset == "pd1-10" || dataset == "pd10" || dataset == "pd20")
            set(64, 32, 0.001, 16384, 1000);
        else if (dataset == "pd40") set(128, 64, 0.0003, 4096, 1000);
        else if (dataset == "pd100") set(256, 128, 0.0001, 2048, 2000);
        else throw std::invalid_argument("no permnet-d preset for dataset: " + dataset);
    } else if (model == "permnet-i") {
        if (dataset == "pi1-10") set(128, 256, 0.0003, 4096, 100);
        else if (dataset == "pi10") set(128, 32, 0.003, 8192, 100);
        else if (dataset == "pi20") set(128, 128, 0.0003, 4096, 100);
        else if (dataset == "pi40") set(128, 256, 0.0003, 1024, 100);
        else if (dataset == "pi100") set(128, 512, 0.00005, 512, 100);
        else if (dataset == "pidict") set(128, 64, 0.001, 16384, 100);
        else throw std::invalid_argument("no permnet-i preset for dataset: " + dataset);
    } else if (model == "copynet+permnet-i") {
        if (dataset == "switch") set(64, 128, 0.001, 128, 40);
        else if (dataset == "pi10") set(128, 32, 0.003, 8192, 100);
        else throw std::invalid_argument("no copynet+permnet-i preset for dataset: " + dataset);
    } else {
        throw std::invalid_argument("unknown model in preset: " + model);
    }

    if (desk) {
        c.train_limit = 30000;
        c.test_limit = 10000;
        c.epochs = std::max(1, c.epochs / 5);
        // Single-core batch calibration: the paper's huge batches would leave
        // a desk run only a handful of optimizer steps.
        if (model == "permnet-d") c.batch = 1024;
        if (model == "permnet-i" || model == "copynet+permnet-i") c.batch = 1024;
        if (model == "copynet" && dataset != "switch") c.batch = 512;
        if (model == "gru" || model == "gru-attn") {
            c.hidden = 128;  // width cut: the full 1024 is a multi-day CPU run
            c.batch = 512;
        }
        if (model == "transformer") c.batch = 128;
    }
    return c;
}

// ---- registry ---------------------------------------------------------------

struct AblationFlags {
    bool no_fixed_vocab = false;
    bool no_me = false, no_mind = false, no_varr = false;
    bool no_mdmkmp = false, no_md = false, no_attention = false, no_mpl = false;
    bool plain_softmax = false;
};

inline AblationFlags parse_ablate(const std::string& model, const std::string& list) {
    AblationFlags f;
    std::string tok;
    std::stringstream ss(list);
    const bool direct = model == "permnet-d";
    const bool indirect = model == "permnet-i" || model == "copynet+permnet-i";
    while (std::getline(ss, tok, ',')) {
        std::string k = cfg_detail::trim(tok);
        std::transform(k.begin(), k.end(), k.begin(), [](unsigned char ch) {
            return static_cast<char>(std::tolower(ch));
        });
        if (k.empty()) continue;
        if (k == "no_fixed_vocab" && (direct || indirect)) f.no_fixed_vocab = true;
        else if (k == "no_me" && direct) f.no_me = true;
        else if (k == "no_mind" && direct) f.no_mind = true;
        else if (k == "no_varr" && direct) f.no_varr = true;
        else if (k == "no_mdmkmp" && indirect) f.no_mdmkmp = true;
        else if (k == "no_md" && indirect) f.no_md = true;
        else if (k == "no_attention" && indirect) f.no_attention = true;
        else if (k == "no_mpl" && indirect) f.no_mpl = true;
        else if (k == "plain_softmax" && indirect) f.plain_softmax = true;
        else throw std::invalid_argument("ablation flag '" + k + "' is not valid for model '" +
                                         model + "'");
    }
    return f;
}

/// The flag set the ablation suite sweeps for a model (paper §5 order).
inline std::vector<std::string> ablation_flag_list(const std::string& model) {
    if (model == "permnet-d") return {"no_fixed_vocab", "no_me", "no_mind", "no_varr"};
    if (model == "permnet-i" || model == "copynet+permnet-i")
        return {"no_fixed_vocab", "no_mdmkmp", "no_md", "no_attention", "no_mpl",
                "plain_softmax"};
    return {};
}

template <class S>
std::unique_ptr<SeqModel<S>> make_model(const RunConfig& c, const DataShape& shape) {
    AblationFlags f = parse_ablate(c.model, c.ablate);
    if (c.model == "permnet-d") {
        typename PermNetD<S>::Options o;
        o.emb = c.emb;
        o.hidden = c.hidden;
        o.no_fixed_vocab = f.no_fixed_vocab;
        o.no_me = f.no_me;
        o.no_mind = f.no_mind;
        o.no_varr = f.no_varr;
        o.normalize_attention = c.normalize_attention;
        o.index_decay = static_cast<S>(c.index_decay);
        return std::make_unique<PermNetD<S>>(shape, o);
    }
    if (c.model == "permnet-i" || c.model == "copynet+permnet-i") {
        typename PermNetI<S>::Options o;
        o.emb = c.emb;
        o.hidden = c.hidden;
        o.with_copynet = c.model == "copynet+permnet-i";
        o.no_fixed_vocab = f.no_fixed_vocab;
        o.no_mdmkmp = f.no_mdmkmp;
        o.no_md = f.no_md;
        o.no_attention = f.no_attention;
        o.no_mpl = f.no_mpl;
        o.plain_softmax = f.plain_softmax;
        o.hidden_mix = c.hidden_mix;
        return std::make_unique<PermNetI<S>>(shape, o);
    }
    if (c.model == "gru" || c.model == "gru-attn") {
        typename GruSeq2Seq<S>::Options o;
        o.emb = c.emb;
        o.hidden = c.hidden;
        o.attention = c.model == "gru-attn";
        return std::make_unique<GruSeq2Seq<S>>(shape, o);
    }
    if (c.model == "copynet") {
        typename CopyNet<S>::Options o;
        o.emb = c.emb;
        o.hidden = c.hidden;
        return std::make_unique<CopyNet<S>>(shape, o);
    }
    if (c.model == "transformer") {
        typename TransformerSeq2Seq<S>::Options o;
        o.d_model = c.emb;
        o.ffn = c.hidden;
        o.layers = c.layers;
        o.heads = c.heads;
        return std::make_unique<TransformerSeq2Seq<S>>(shape, o);
    }
    throw std::invalid_argument("unknown model: " + c.model);
}

template <class S>
void init_model(SeqModel<S>& m, Rng& rng) {
    // Each concrete model exposes init(Rng&); dispatch by kind.
    if (auto* p = dynamic_cast<PermNetD<S>*>(&m)) return p->init(rng);
    if (auto* p = dynamic_cast<PermNetI<S>*>(&m)) return p->init(rng);
    if (auto* p = dynamic_cast<GruSeq2Seq<S>*>(&m)) return p->init(rng);
    if (auto* p = dynamic_cast<CopyNet<S>*>(&m)) return p->init(rng);
    if (auto* p = dynamic_cast<TransformerSeq2Seq<S>*>(&m)) return p->init(rng);
    throw std::logic_error("init_model: unknown concrete model");
}

// ---- optimizer -----------------------------------------------------------

template <class S>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// One update from the gradients currently in the store. Decoupled decay:
    /// parameters with weight_decay > 0 shrink by lr * decay * value on top
    /// of the Adam step; everything else gets a decay term of exactly zero.
    void step(ParameterStore<S>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < store.count(); ++i) {
            auto& e = store.entry(i);
            if (e.m.size() == 0) {
                e.m = Mat<S>::Zero(e.value.rows(), e.value.cols());
                e.v = Mat<S>::Zero(e.value.rows(), e.value.cols());
            }
            e.m = S(b1_) * e.m + S(1.0 - b1_) * e.grad;
            e.v = (S(b2_) * e.v.array() + S(1.0 - b2_) * e.grad.array().square()).matrix();
            Mat<S> mhat = e.m / S(bc1);
            Mat<S> vhat = e.v / S(bc2);
            e.value.array() -= S(lr_) * mhat.array() / (vhat.array().sqrt() + S(eps_));
            if (e.weight_decay > S(0))
                e.value.array() -= S(lr_) * e.weight_decay * e.value.array();
        }
    }

    long steps_taken() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

/// Global gradient-norm clip; returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParameterStore<S>& store, double max_norm) {
    double sq = 0;
    for (std::size_t i = 0; i < store.count(); ++i)
        sq += static_cast<double>(store.entry(i).grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const S scale = static_cast<S>(max_norm / norm);
        for (std::size_t i = 0; i < store.count(); ++i) store.entry(i).grad *= scale;
    }
    return norm;
}

// ---- encoded data ----------------------------------------------------------

struct EncodedSplit {
    std::vector<std::vector<int>> src, tgt;
    std::size_t size() const { return src.size(); }
};

struct EncodedData {
    EncodedSplit train, valid, test;
    Vocabulary vocab;
    DataShape shape;
    Family family = Family::DirectPerm;
    int length_max = 0;
};

inline EncodedSplit encode_split(const std::vector<Example>& exs, const Vocabulary& vocab) {
    EncodedSplit s;
    s.src.reserve(exs.size());
    s.tgt.reserve(exs.size());
    for (const auto& e : exs) {
        s.src.push_back(vocab.encode(e.source));
        s.tgt.push_back(vocab.encode(e.target));
    }
    return s;
}

inline EncodedData encode_dataset(const LoadedDataset& ds) {
    EncodedData d;
    d.vocab = ds.vocab;
    d.family = ds.spec.family;
    d.length_max = ds.spec.length_max;
    d.train = encode_split(ds.splits.train, ds.vocab);
    d.valid = encode_split(ds.splits.valid, ds.vocab);
    d.test = encode_split(ds.splits.test, ds.vocab);
    d.shape.vocab_size = static_cast<int>(ds.vocab.size());
    d.shape.k_max = std::max(1, ds.spec.length_max);
    int maxlen = 1;
    for (const auto* split : {&d.train, &d.valid, &d.test})
        for (const auto& s : split->src) maxlen = std::max(maxlen, static_cast<int>(s.size()));
    d.shape.max_src_len = maxlen;
    return d;
}

// ---- batching ---------------------------------------------------------------

/// Length-bucketed batch index sets: examples with identical (src, tgt)
/// lengths share a batch so no padding ambiguity enters the accumulation ops.
inline std::vector<std::vector<std::size_t>> bucketed_batches(const EncodedSplit& split,
                                                              const std::vector<std::size_t>& order,
                                                              int batch_size) {
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> buckets;
    for (std::size_t idx : order)
        buckets[{split.src[idx].size(), split.tgt[idx].size()}].push_back(idx);
    std::vector<std::vector<std::size_t>> batches;
    for (auto& [key, ids] : buckets) {
        for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(batch_size)) {
            const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                 ids.size() - i);
            batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                                 ids.begin() + static_cast<std::ptrdiff_t>(i + n));
        }
    }
    return batches;
}

inline Batch gather_batch(const EncodedSplit& split, const std::vector<std::size_t>& idx) {
    std::vector<std::vector<int>> src, tgt;
    src.reserve(idx.size());
    tgt.reserve(idx.size());
    for (std::size_t i : idx) {
        src.push_back(split.src[i]);
        tgt.push_back(split.tgt[i]);
    }
    return make_batch(src, tgt);
}

// ---- evaluation ------------------------------------------------------------

struct DecodedSplit {
    std::vector<std::vector<int>> preds, refs;  // refs drop the leading <sos>
};

/// Free-running greedy decode over a split subset; max output length is
/// source length + 2. Results are ordered like `subset`.
template <class S>
DecodedSplit greedy_decode_split(SeqModel<S>& model, const EncodedSplit& split,
                                 const std::vector<std::size_t>& subset, int batch_size = 512) {
    DecodedSplit d;
    d.preds.resize(subset.size());
    d.refs.resize(subset.size());
    auto batches = bucketed_batches(split, subset, batch_size);
    std::map<std::size_t, std::size_t> back;
    for (std::size_t i = 0; i < subset.size(); ++i) back[subset[i]] = i;
    for (const auto& ids : batches) {
        Batch b = gather_batch(split, ids);
        int max_steps = 0;
        for (int len : b.src_len) max_steps = std::max(max_steps, len + 2);
        auto out = model.greedy(b, max_steps);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const std::size_t slot = back.at(ids[r]);
            d.preds[slot] = out[r];
            d.refs[slot] = std::vector<int>(split.tgt[ids[r]].begin() + 1,
                                            split.tgt[ids[r]].end());
        }
    }
    return d;
}

inline std::vector<std::size_t> prefix_subset(const EncodedSplit& split, long limit) {
    const std::size_t n = limit > 0 ? std::min<std::size_t>(split.size(),
                                                            static_cast<std::size_t>(limit))
                                    : split.size();
    std::vector<std::size_t> subset(n);
    for (std::size_t i = 0; i < n; ++i) subset[i] = i;
    return subset;
}

template <class S>
EvalResult evaluate_split(SeqModel<S>& model, const EncodedSplit& split,
                          const std::vector<std::size_t>& subset, int batch_size = 512) {
    DecodedSplit d = greedy_decode_split(model, split, subset, batch_size);
    return aggregate_accuracy(d.preds, d.refs);
}

template <class S>
EvalResult evaluate_all(SeqModel<S>& model, const EncodedSplit& split, long limit,
                        int batch_size = 512) {
    return evaluate_split(model, split, prefix_subset(split, limit), batch_size);
}

/// One line per example: predicted tokens <TAB> reference tokens, both
/// decoded through the vocabulary (references without the leading <sos>).
inline void write_predictions_tsv(const std::string& path, const DecodedSplit& d,
                                  const Vocabulary& vocab) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write predictions: " + path);
    for (std::size_t i = 0; i < d.preds.size(); ++i) {
        auto p = vocab.decode(d.preds[i]);
        auto r = vocab.decode(d.refs[i]);
        for (std::size_t t = 0; t < p.size(); ++t) os << (t ? " " : "") << p[t];
        os << '\t';
        for (std::size_t t = 0; t < r.size(); ++t) os << (t ? " " : "") << r[t];
        os << '\n';
    }
}

// ---- training --------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_ta = 0.0;
    double val_wea = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    EvalResult test;
    bool diverged = false;
    double seconds = 0.0;
    std::string checkpoint_path;
    std::string metrics_path;
};

/// Derived-shape echo appended to the config echo so a checkpoint can be
/// rebuilt without reopening the dataset.
inline std::string shape_echo(const DataShape& s) {
    std::ostringstream os;
    os << "# derived\n"
       << "vocab_size = " << s.vocab_size << "\n"
       << "max_src_len = " << s.max_src_len << "\n"
       << "k_max = " << s.k_max << "\n";
    return os.str();
}

inline DataShape parse_shape_echo(const std::string& echo) {
    DataShape s;
    std::istringstream is(echo);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = cfg_detail::trim(line.substr(0, eq));
        std::string val = cfg_detail::trim(line.substr(eq + 1));
        if (key == "vocab_size") s.vocab_size = std::stoi(val);
        else if (key == "max_src_len") s.max_src_len = std::stoi(val);
        else if (key == "k_max") s.k_max = std::stoi(val);
    }
    if (s.vocab_size < 1) throw std::runtime_error("checkpoint echo lacks the derived shape");
    return s;
}

/// Strip the derived section so parse_config (which rejects unknown keys)
/// can read the head.
inline RunConfig parse_config_echo(const std::string& echo) {
    const auto cut = echo.find("# derived");
    std::istringstream is(cut == std::string::npos ? echo : echo.substr(0, cut));
    return parse_config(is);
}

template <class S>
TrainResult train_run(const RunConfig& cfg, const EncodedData& data,
                      const std::function<void(const EpochRecord&)>& on_epoch = nullptr) {
    cfg.validate();
    namespace fs = std::filesystem;
    if (cfg.out.empty()) throw std::invalid_argument("config: out directory is required");
    fs::create_directories(cfg.out);

    auto model = make_model<S>(cfg, data.shape);
    Rng init_rng(mix_seed(cfg.seed, 0x1a2b3c4dULL));
    init_model(*model, init_rng);

    const std::string policy = !cfg.ckpt_policy.empty()
                                   ? cfg.ckpt_policy
                                   : (model->kind().rfind("permnet", 0) == 0 ||
                                              model->kind() == "copynet+permnet-i"
                                          ? "last"
                                          : "best");
    if (policy != "last" && policy != "best")
        throw std::invalid_argument("ckpt_policy must be last or best");

    const std::string echo = serialize_config(cfg) + shape_echo(data.shape);
    TrainResult result;
    result.checkpoint_path = (fs::path(cfg.out) / "checkpoint.bin").string();
    result.metrics_path = (fs::path(cfg.out) / "metrics.jsonl").string();

    std::ofstream metrics(result.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write metrics: " + result.metrics_path);
    metrics << "{\"header\":{\"model\":\"" << model->kind() << "\",\"data\":\"" << cfg.data
            << "\",\"seed\":" << cfg.seed << ",\"epochs\":" << cfg.epochs
            << ",\"ta_mode\":\"free-running\",\"policy\":\"" << policy << "\"}}\n";
    metrics.flush();

    // Training subset (deterministic prefix of a seeded shuffle when limited).
    std::vector<std::size_t> train_idx(data.train.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = i;
    Rng subset_rng(mix_seed(cfg.seed, 0x5eedULL));
    subset_rng.shuffle(train_idx);
    if (cfg.train_limit > 0 && static_cast<std::size_t>(cfg.train_limit) < train_idx.size())
        train_idx.resize(static_cast<std::size_t>(cfg.train_limit));

    std::vector<std::size_t> val_idx(data.valid.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = i;
    Rng val_rng(mix_seed(cfg.seed, 0xeea1ULL));
    val_rng.shuffle(val_idx);
    if (cfg.eval_limit > 0 && static_cast<std::size_t>(cfg.eval_limit) < val_idx.size())
        val_idx.resize(static_cast<std::size_t>(cfg.eval_limit));

    Adam<S> adam(cfg.lr);
    save_checkpoint(result.checkpoint_path, model->params(), echo);  // last-good fallback
    double best_wea = -1.0, best_ta = -1.0;

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    for (int epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
        Rng order_rng(mix_seed(cfg.seed, 0xe90c000ULL + static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> order = train_idx;
        order_rng.shuffle(order);
        auto batches = bucketed_batches(data.train, order, cfg.batch);
        // Fixed deterministic batch order within the epoch.
        double loss_sum = 0.0;
        long token_sum = 0;
        for (const auto& ids : batches) {
            Batch b = gather_batch(data.train, ids);
            Tape<S> tape;
            bool teacher = cfg.teacher_forcing >= 1.0;
            if (!teacher && cfg.teacher_forcing > 0.0)
                teacher = order_rng.uniform() < cfg.teacher_forcing;
            LossInfo li = model->loss(tape, b, teacher);
            const double batch_loss = static_cast<double>(tape.val(li.loss)(0, 0));
            if (!std::isfinite(batch_loss)) {
                result.diverged = true;
                break;
            }
            loss_sum += batch_loss;
            token_sum += li.tokens;
            Var mean = tape.scale(li.loss, S(1) / static_cast<S>(std::max<long>(1, li.tokens)));
            model->params().zero_grads();
            tape.backward(mean);
            if (cfg.grad_clip > 0) clip_grad_norm(model->params(), cfg.grad_clip);
            adam.step(model->params());
        }
        if (result.diverged) break;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = token_sum > 0 ? loss_sum / static_cast<double>(token_sum) : 0.0;
        EvalResult val = evaluate_split(*model, data.valid, val_idx,
                                        std::min(cfg.batch, 512));
        rec.val_ta = val.ta;
        rec.val_wea = val.wea;
        rec.seconds = elapsed();
        result.epochs.push_back(rec);
        metrics << "{\"epoch\":" << rec.epoch << ",\"train_loss\":" << rec.train_loss
                << ",\"val_ta\":" << rec.val_ta << ",\"val_wea\":" << rec.val_wea
                << ",\"seconds\":" << rec.seconds << "}\n";
        metrics.flush();
        if (on_epoch) on_epoch(rec);

        if (policy == "last") {
            save_checkpoint(result.checkpoint_path, model->params(), echo);
        } else if (val.wea > best_wea || (val.wea == best_wea && val.ta > best_ta)) {
            best_wea = val.wea;
            best_ta = val.ta;
            save_checkpoint(result.checkpoint_path, model->params(), echo);
        }
    }

    // Final test evaluation runs on the checkpoint the policy selected.
    {
        CheckpointData d = load_checkpoint(result.checkpoint_path);
        restore_parameters(model->params(), d);
    }
    DecodedSplit test_out = greedy_decode_split(*model, data.test,
                                                prefix_subset(data.test, cfg.test_limit),
                                                std::min(cfg.batch, 512));
    result.test = aggregate_accuracy(test_out.preds, test_out.refs);
    write_predictions_tsv((fs::path(cfg.out) / "predictions_test.tsv").string(), test_out,
                          data.vocab);
    result.seconds = elapsed();
    metrics << "{\"final\":{\"test_ta\":" << result.test.ta << ",\"test_wea\":"
            << result.test.wea << ",\"diverged\":" << (result.diverged ? "true" : "false")
            << ",\"seconds\":" << result.seconds << "}}\n";
    metrics.flush();

    std::ofstream cfg_out(fs::path(cfg.out) / "config.txt", std::ios::trunc);
    cfg_out << echo;
    return result;
}

/// Convenience: load + encode + train.
template <class S>
TrainResult train_from_dir(const RunConfig& cfg,
                           const std::function<void(const EpochRecord&)>& on_epoch = nullptr) {
    LoadedDataset ds = load_dataset_dir(cfg.data);
    EncodedData data = encode_dataset(ds);
    return train_run<S>(cfg, data, on_epoch);
}

/// Rebuild a model from a checkpoint (echo carries config + derived shape).
template <class S>
std::pair<std::unique_ptr<SeqModel<S>>, RunConfig> model_from_checkpoint(
    const std::string& path) {
    CheckpointData d = load_checkpoint(path);
    RunConfig cfg = parse_config_echo(d.config_echo);
    DataShape shape = parse_shape_echo(d.config_echo);
    auto model = make_model<S>(cfg, shape);
    restore_parameters(model->params(), d);
    return {std::move(model), cfg};
}

// ---- ablation suite -------------------------------------------------------

struct AblationRow {
    std::string flag;  // "base" for the unablated run
    EvalResult test;
    bool diverged = false;
};

template <class S>
std::vector<AblationRow> run_ablation_suite(const RunConfig& base_cfg, const EncodedData& data,
                                            const std::vector<std::string>& flags,
                                            const std::function<void(const std::string&)>&
                                                on_run = nullptr) {
    std::vector<AblationRow> rows;
    std::vector<std::string> all = {"base"};
    for (const auto& f : flags) all.push_back(f);
    for (const auto& f : all) {
        RunConfig cfg = base_cfg;
        cfg.ablate = f == "base" ? "" : f;
        cfg.out = (std::filesystem::path(base_cfg.out) /
                   (f == "base" ? "base" : f)).string();
        if (on_run) on_run(f);
        TrainResult r = train_run<S>(cfg, data);
        rows.push_back(AblationRow{f, r.test, r.diverged});
    }
    return rows;
}

inline std::string ablation_table_markdown(const std::string& model,
                                           const std::string& dataset,
                                           const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "| Variant (" << model << " on " << dataset << ") | TA | WEA |\n";
    os << "| --- | --- | --- |\n";
    for (const auto& r : rows) {
        os << "| " << (r.flag == "base" ? "base" : "-" + r.flag) << " | ";
        if (r.diverged) os << "diverged | diverged |\n";
        else {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.2f%% | %.2f%% |", r.test.ta * 100.0,
                          r.test.wea * 100.0);
            os << buf << "\n";
        }
    }
    return os.str();
}

inline std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,ta,wea,diverged\n";
    for (const auto& r : rows)
        os << r.flag << "," << r.test.ta << "," << r.test.wea << ","
           << (r.diverged ? 1 : 0) << "\n";
    return os.str();
}

} // namespace permnet
