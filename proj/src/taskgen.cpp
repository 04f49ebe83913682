#include "permnet/taskgen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace permnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<std::string> resolve_direct(const std::vector<std::string>& data,
                                        const std::vector<int>& indices) {
    const int n = static_cast<int>(data.size());
    if (static_cast<int>(indices.size()) != n)
        throw std::invalid_argument("index sequence length " + std::to_string(indices.size()) +
                                    " does not match data length " + std::to_string(n));
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int idx : indices) {
        if (idx < 0 || idx >= n)
            throw std::invalid_argument("index " + std::to_string(idx) + " out of range [0, " +
                                        std::to_string(n) + ")");
        if (seen[static_cast<std::size_t>(idx)])
            throw std::invalid_argument("index " + std::to_string(idx) + " repeats; not a permutation");
        seen[static_cast<std::size_t>(idx)] = 1;
    }
    std::vector<std::string> out;
    out.reserve(data.size());
    for (int idx : indices) out.push_back(data[static_cast<std::size_t>(idx)]);
    return out;
}

std::vector<std::string> resolve_indirect(const std::vector<DataKeyPair>& pairs,
                                          const std::vector<std::string>& queries) {
    std::unordered_map<std::string, std::string> by_key;
    for (const auto& p : pairs) {
        if (!by_key.emplace(p.key, p.data).second)
            throw std::invalid_argument("duplicate key '" + p.key + "'");
    }
    std::vector<std::string> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        auto it = by_key.find(q);
        if (it == by_key.end()) throw std::invalid_argument("query key '" + q + "' matches no pair");
        out.push_back(it->second);
    }
    return out;
}

std::vector<std::string> data_alphabet(int length_max) {
    std::vector<std::string> alpha;
    if (length_max <= 10) {
        for (char c = 'a'; c <= 'j'; ++c) alpha.emplace_back(1, c);
    } else {
        alpha.reserve(static_cast<std::size_t>(length_max));
        for (int i = 0; i < length_max; ++i) alpha.push_back("d" + std::to_string(i));
    }
    return alpha;
}

namespace {

std::vector<std::string> draw_without_replacement(const std::vector<std::string>& alphabet, int n, Rng& rng) {
    if (n > static_cast<int>(alphabet.size()))
        throw std::invalid_argument("data alphabet of size " + std::to_string(alphabet.size()) +
                                    " too small for length " + std::to_string(n));
    // partial Fisher-Yates over a copy
    std::vector<std::string> pool = alphabet;
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(i) +
                              static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
        out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
}

Example make_direct_example(int n, const std::vector<std::string>& alphabet, Rng& rng) {
    const auto data = draw_without_replacement(alphabet, n, rng);
    const auto indices = rng.permutation(n);
    const auto resolved = resolve_direct(data, indices);

    Example ex;
    ex.family = Family::DirectPerm;
    ex.data_length = n;
    ex.source.push_back("<sos>");
    for (const auto& d : data) ex.source.push_back(d);
    ex.source.push_back("<sep>");
    for (int idx : indices) ex.source.push_back(std::to_string(idx));
    ex.source.push_back("<eos>");
    ex.target.push_back("<sos>");
    for (const auto& t : resolved) ex.target.push_back(t);
    ex.target.push_back("<eos>");
    return ex;
}

Example make_indirect_example(int n, bool dict_queries, const std::vector<std::string>& alphabet, Rng& rng) {
    const auto data = draw_without_replacement(alphabet, n, rng);
    const auto key_perm = rng.permutation(n); // keys 1..n, permuted
    std::vector<DataKeyPair> pairs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        pairs[static_cast<std::size_t>(i)] = {data[static_cast<std::size_t>(i)],
                                              std::to_string(key_perm[static_cast<std::size_t>(i)] + 1)};

    std::vector<std::string> queries;
    queries.reserve(static_cast<std::size_t>(n));
    if (dict_queries) {
        for (int i = 0; i < n; ++i)
            queries.push_back(pairs[static_cast<std::size_t>(rng.below_int(n))].key);
    } else {
        for (int i : rng.permutation(n)) queries.push_back(pairs[static_cast<std::size_t>(i)].key);
    }
    const auto resolved = resolve_indirect(pairs, queries);

    Example ex;
    ex.family = dict_queries ? Family::IndirectDict : Family::IndirectPerm;
    ex.data_length = n;
    ex.source.push_back("<sos>");
    for (const auto& p : pairs) {
        ex.source.push_back(p.data);
        ex.source.push_back(p.key);
    }
    ex.source.push_back("<sep>");
    for (const auto& q : queries) ex.source.push_back(q);
    ex.source.push_back("<eos>");
    ex.target.push_back("<sos>");
    for (const auto& t : resolved) ex.target.push_back(t);
    ex.target.push_back("<eos>");
    return ex;
}

// Compared-variable and control tokens of the assembly chain.
const char* const kCmpPrefix[] = {"cmp", "QWORD", "PTR", "-8", "[", "rbp", "]"};

void append_cmp(std::vector<std::string>& out, long long value) {
    for (const char* tok : kCmpPrefix) out.emplace_back(tok);
    out.push_back(std::to_string(value));
}

std::string text_label(int text_pos) {
    // .L2 for the first je target, .L3 reserved for default, .L4.. after
    return text_pos == 0 ? ".L2" : ".L" + std::to_string(text_pos + 3);
}

// Labels are numbered by the text order of the je instructions; the je-only
// tail visits the smallest value before the second smallest.
std::string chain_label(int chain_index, int case_count) {
    if (chain_index <= case_count - 3) return text_label(chain_index);
    return chain_index == case_count - 1 ? text_label(case_count - 2) : text_label(case_count - 1);
}

} // namespace

Example make_switch_example(const SwitchLayout& layout) {
    const int n = static_cast<int>(layout.chain_values.size());
    if (n < 2) throw std::invalid_argument("switch statement needs at least 2 cases");
    if (static_cast<int>(layout.block_order.size()) != n)
        throw std::invalid_argument("block order size does not match case count");
    const std::string default_label = ".L3";

    Example ex;
    ex.family = Family::SwitchCorpus;
    ex.data_length = n;

    auto& src = ex.source;
    src.push_back("<sos>");
    // Comparison chain: cmp/je/cmp/jg triples for all but the two smallest
    // values, then a je-only tail.
    for (int i = 0; i + 2 < n; ++i) {
        append_cmp(src, layout.chain_values[static_cast<std::size_t>(i)]);
        src.push_back("je");
        src.push_back(chain_label(i, n));
        append_cmp(src, layout.chain_values[static_cast<std::size_t>(i)]);
        src.push_back("jg");
        src.push_back(default_label);
    }
    append_cmp(src, layout.chain_values[static_cast<std::size_t>(n - 1)]);
    src.push_back("je");
    src.push_back(chain_label(n - 1, n));
    append_cmp(src, layout.chain_values[static_cast<std::size_t>(n - 2)]);
    src.push_back("je");
    src.push_back(chain_label(n - 2, n));
    src.push_back("jmp");
    src.push_back(default_label);

    src.push_back("<sep>");
    for (int b = 0; b < n; ++b) {
        src.push_back(chain_label(layout.block_order[static_cast<std::size_t>(b)], n));
        src.push_back(":");
        src.push_back("<inner-block-" + std::to_string(b + 1) + ">");
    }
    src.push_back(default_label);
    src.push_back(":");
    src.push_back("<eos>");

    auto& tgt = ex.target;
    tgt = {"<sos>", "switch", "(", "y", ")", "{"};
    for (int b = 0; b < n; ++b) {
        tgt.push_back("case");
        tgt.push_back(std::to_string(layout.chain_values[static_cast<std::size_t>(layout.block_order[static_cast<std::size_t>(b)])]));
        tgt.push_back(":");
        tgt.push_back("<inner-block-" + std::to_string(b + 1) + ">");
    }
    tgt.push_back("}");
    tgt.push_back("<eos>");
    return ex;
}

SwitchLayout random_switch_layout(int case_count, long long value_min, long long value_max, Rng& rng) {
    if (case_count < 2) throw std::invalid_argument("switch statement needs at least 2 cases");
    const long long span = value_max - value_min + 1;
    if (span < case_count)
        throw std::invalid_argument("value range of size " + std::to_string(span) +
                                    " too small for " + std::to_string(case_count) + " cases");
    std::set<long long> values;
    while (static_cast<int>(values.size()) < case_count)
        values.insert(value_min + static_cast<long long>(rng.below(static_cast<std::uint64_t>(span))));

    SwitchLayout layout;
    layout.chain_values.assign(values.rbegin(), values.rend()); // descending
    layout.block_order = rng.permutation(case_count);
    return layout;
}

Example generate_example(const TaskSpec& spec, std::uint64_t index) {
    Rng rng(mix_seed(spec.master_seed, index));
    const int n = spec.length_min +
                  (spec.length_max > spec.length_min
                       ? rng.below_int(spec.length_max - spec.length_min + 1)
                       : 0);
    switch (spec.family) {
    case Family::DirectPerm:
        return make_direct_example(n, data_alphabet(spec.length_max), rng);
    case Family::IndirectPerm:
        return make_indirect_example(n, false, data_alphabet(spec.length_max), rng);
    case Family::IndirectDict:
        return make_indirect_example(n, true, data_alphabet(spec.length_max), rng);
    case Family::SwitchCorpus:
        return make_switch_example(random_switch_layout(n, spec.value_min, spec.value_max, rng));
    }
    throw std::logic_error("unreachable family");
}

std::vector<Example> generate(const TaskSpec& spec) {
    spec.validate();
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(spec.example_count));
    for (int i = 0; i < spec.example_count; ++i)
        out.push_back(generate_example(spec, static_cast<std::uint64_t>(i)));
    return out;
}

DatasetSplits dedup_and_split(std::vector<Example> examples, const double ratios[3]) {
    std::unordered_set<std::string> seen;
    std::vector<Example> uniq;
    uniq.reserve(examples.size());
    for (auto& ex : examples) {
        if (seen.insert(serialize_example(ex)).second) uniq.push_back(std::move(ex));
    }
    const std::size_t n = uniq.size();
    const std::size_t n_train = static_cast<std::size_t>(static_cast<double>(n) * ratios[0] + 0.5);
    const std::size_t n_valid = static_cast<std::size_t>(static_cast<double>(n) * ratios[1] + 0.5);
    DatasetSplits splits;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train) splits.train.push_back(std::move(uniq[i]));
        else if (i < n_train + n_valid) splits.valid.push_back(std::move(uniq[i]));
        else splits.test.push_back(std::move(uniq[i]));
    }
    return splits;
}

void write_dataset(const std::vector<Example>& examples, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path);
    for (const auto& ex : examples) out << serialize_example(ex) << '\n';
}

std::vector<Example> read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read dataset file: " + path);
    std::vector<Example> out;
    std::string line;
    int lineno = 1;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(parse_example_line(line, lineno));
        ++lineno;
    }
    return out;
}

Vocabulary build_vocab(const std::vector<Example>& examples) {
    Vocabulary v;
    for (const auto& ex : examples) {
        v.collect(ex.source);
        v.collect(ex.target);
    }
    v.finalize();
    return v;
}

void write_dataset_dir(const TaskSpec& spec, const DatasetSplits& splits, const Vocabulary& vocab,
                       const std::string& out_dir) {
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    write_dataset(splits.train, (dir / "train.tsv").string());
    write_dataset(splits.valid, (dir / "valid.tsv").string());
    write_dataset(splits.test, (dir / "test.tsv").string());
    vocab.save((dir / "vocab.txt").string());

    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + out_dir);
    const std::pair<const char*, const std::vector<Example>*> parts[] = {
        {"train", &splits.train}, {"valid", &splits.valid}, {"test", &splits.test}};
    for (const auto& [name, part] : parts) {
        json rec = {{"family", family_name(spec.family)},
                    {"length_min", spec.length_min},
                    {"length_max", spec.length_max},
                    {"count", part->size()},
                    {"seed", spec.master_seed},
                    {"split", name}};
        manifest << rec.dump() << '\n';
    }
}

LoadedDataset load_dataset_dir(const std::string& dir) {
    const fs::path d(dir);
    LoadedDataset ds;
    std::ifstream manifest(d / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw std::runtime_error("missing manifest.jsonl in " + dir);
    std::string line;
    bool have_spec = false;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        ds.spec.family = family_from_name(rec.at("family").get<std::string>());
        ds.spec.length_min = rec.at("length_min").get<int>();
        ds.spec.length_max = rec.at("length_max").get<int>();
        ds.spec.master_seed = rec.at("seed").get<std::uint64_t>();
        have_spec = true;
    }
    if (!have_spec) throw std::runtime_error("empty manifest in " + dir);

    ds.splits.train = read_dataset((d / "train.tsv").string());
    ds.splits.valid = read_dataset((d / "valid.tsv").string());
    ds.splits.test = read_dataset((d / "test.tsv").string());
    ds.vocab = Vocabulary::load((d / "vocab.txt").string());
    for (auto* part : {&ds.splits.train, &ds.splits.valid, &ds.splits.test}) {
        for (auto& ex : *part) {
            ex.family = ds.spec.family;
            int sep = static_cast<int>(std::find(ex.source.begin(), ex.source.end(), "<sep>") - ex.source.begin());
            if (ds.spec.family == Family::DirectPerm) ex.data_length = sep - 1;
            else if (ds.spec.family != Family::SwitchCorpus) ex.data_length = (sep - 1) / 2;
        }
    }
    return ds;
}

} // namespace permnet
